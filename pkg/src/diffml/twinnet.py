"""Feedforward networks with twin (value and input-gradient) evaluation.

A network maps rows of ``X`` through ``z_l = a_{l-1} W_l + b_l`` with
``a_l = g(z_l)`` on hidden layers and a linear output layer. The twin pass
runs backpropagation from the output with boundary ``1`` and returns
``x_bar = dy/dx`` for every row at roughly the cost of a second forward pass.

Differential training minimizes

    C = v mean(w_i (y_i - Y_i)^2) + lam mean(w_i sum_j c_j (x_bar_ij - Z_ij)^2)

where ``c_j`` rescales each differential column to unit mean square. Its
gradient wrt the weights is obtained by differentiating through the twin
pass by hand (backprop through backprop), which needs ``g'`` and ``g''``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Optional

import numpy as np
from scipy.special import expit

from . import serialize


class ConfigurationError(ValueError):
    """Invalid network or training configuration."""


class ReweightingError(ValueError):
    """A differential column has zero norm but a nonzero weight was requested."""


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, msg, epoch=None, batch=None):
        super().__init__(f"{msg} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


# --- activations ------------------------------------------------------------------

@dataclass(frozen=True)
class Activation:
    """Scalar activation with its first and second derivatives (elementwise)."""

    name: str
    g: Callable
    dg: Callable
    d2g: Callable
    smooth: bool = True


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid_prime(x):
    s = expit(x)
    return s * (1.0 - s)


def _tanh_prime(x):
    return 1.0 - np.tanh(x) ** 2


def _tanh_second(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


ACTIVATIONS = {
    "softplus": Activation("softplus", _softplus, expit, _sigmoid_prime),
    "tanh": Activation("tanh", np.tanh, _tanh_prime, _tanh_second),
    "relu": Activation("relu", lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(float),
                       np.zeros_like, smooth=False),
}


def get_activation(act) -> Activation:
    if isinstance(act, Activation):
        a = act
    else:
        if act not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {act!r}; expected one of {sorted(ACTIVATIONS)}")
        a = ACTIVATIONS[act]
    if not a.smooth:
        raise ConfigurationError(f"activation {a.name!r} is not continuously differentiable; "
                                 "twin networks need a C1 activation such as softplus")
    return a


# --- network -------------------------------------------------------------------------

class MLP:
    """Fully connected network with a linear output layer.

    Args:
        weights: per-layer ``n_{l-1} x n_l`` matrices.
        biases: per-layer ``n_l`` vectors.
        activation: name in :data:`ACTIVATIONS` or an :class:`Activation`.
    """

    def __init__(self, weights, biases, activation="softplus"):
        self.activation = get_activation(activation)
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float).reshape(-1) for b in biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise ConfigurationError("need one bias per weight matrix and at least one layer")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.size != w.shape[1]:
                raise ConfigurationError(f"layer {l + 1}: weight {w.shape} and bias {b.shape} disagree")
            if l and w.shape[0] != self.weights[l - 1].shape[1]:
                raise ConfigurationError(f"layer {l + 1}: input width {w.shape[0]} does not match "
                                         f"previous output {self.weights[l - 1].shape[1]}")

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_inputs(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_outputs(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list:
        return self.weights + self.biases

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    def to_dict(self) -> dict:
        return {"layer_sizes": self.layer_sizes, "activation": self.activation.name,
                "weights": [serialize.encode_array(w) for w in self.weights],
                "biases": [serialize.encode_array(b) for b in self.biases]}

    @classmethod
    def from_dict(cls, d) -> "MLP":
        net = cls([serialize.decode_array(w) for w in d["weights"]],
                  [serialize.decode_array(b) for b in d["biases"]], d["activation"])
        if net.layer_sizes != list(d["layer_sizes"]):
            raise serialize.SchemaError("layer sizes do not match stored weights")
        return net

    def save(self, path):
        serialize.dump(path, "mlp", self.to_dict())

    @classmethod
    def load(cls, path) -> "MLP":
        return cls.from_dict(serialize.load(path, "mlp"))


def init_weights(layer_sizes, seed=0, activation="softplus") -> MLP:
    """Glorot-uniform weights in ``+-sqrt(6/(n_in+n_out))`` and zero biases."""
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ConfigurationError(f"invalid layer sizes {layer_sizes}")
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (n_in + n_out))
        ws.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
        bs.append(np.zeros(n_out))
    return MLP(ws, bs, activation)


def default_architecture(n_inputs, hidden=(20, 20, 20, 20), n_outputs=1):
    return [n_inputs, *hidden, n_outputs]


# --- evaluation -------------------------------------------------------------------

class ForwardCache(NamedTuple):
    a: list   # a[0] = X, a[l] = g(z_l) for hidden layers
    z: list   # z[l - 1] = pre-activation of layer l, l = 1..L


class OpCount:
    """Rough floating-point operation tally (multiply-adds count as one)."""

    def __init__(self):
        self.forward = 0
        self.backward = 0

    @property
    def ratio(self) -> float:
        return (self.forward + self.backward) / self.forward


def _check_input(net, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != net.n_inputs:
        raise ValueError(f"input has shape {X.shape}, expected (m, {net.n_inputs})")
    return X


def forward(net: MLP, X, ops: Optional[OpCount] = None):
    """Value pass over a batch; returns ``(Y_hat, cache)``.

    ``Y_hat`` has shape ``(m,)`` for a single output and ``(m, n_L)`` otherwise.
    """
    X = _check_input(net, X)
    g = net.activation.g
    a, zs = [X], []
    L = len(net.weights)
    for l, (w, b) in enumerate(zip(net.weights, net.biases), start=1):
        z = a[-1] @ w + b
        zs.append(z)
        if ops is not None:
            ops.forward += X.shape[0] * w.shape[1] * (w.shape[0] + (2 if l < L else 1))
        if l < L:
            a.append(g(z))
    y = zs[-1]
    return (y[:, 0] if net.n_outputs == 1 else y), ForwardCache(a, zs)


class TwinOutput(NamedTuple):
    y: np.ndarray
    x_bar: np.ndarray
    cache: Optional[ForwardCache] = None
    z_bar: Optional[list] = None
    a_bar: Optional[list] = None


def _backward(net, cache, zbar_L, ops=None):
    """Backpropagate ``zbar_L`` (trailing axis = output units) to the inputs.

    Returns ``(x_bar, zbars, abars)`` with ``zbars[l-1]`` the adjoint of
    ``z_l`` and ``abars[l]`` the adjoint of ``a_l`` (``abars[0] = x_bar``).
    """
    dg = net.activation.dg
    L = len(net.weights)
    zbars, abars = [None] * L, [None] * L
    zbar = zbar_L
    zbars[-1] = zbar
    for l in range(L, 0, -1):
        w = net.weights[l - 1]
        abar = zbar @ w.T
        abars[l - 1] = abar
        if ops is not None:
            ops.backward += int(np.prod(abar.shape)) * w.shape[1]
        if l == 1:
            return abar, zbars, abars
        gp = dg(cache.z[l - 2])
        zbar = abar * (gp if abar.ndim == 2 else gp[:, None, :])
        if ops is not None:
            ops.backward += 2 * int(np.prod(abar.shape))
        zbars[l - 2] = zbar


def twin_eval(net: MLP, X, ops: Optional[OpCount] = None) -> TwinOutput:
    """Values and input gradients ``dy/dx`` of a single-output net."""
    if net.n_outputs != 1:
        raise ValueError("twin_eval needs a single output; use twin_eval_multi")
    y, cache = forward(net, X, ops)
    x_bar, zbars, abars = _backward(net, cache, np.ones((y.shape[0], 1)), ops)
    return TwinOutput(y, x_bar, cache, zbars, abars)


def twin_eval_multi(net: MLP, X):
    """Values ``(m, n_L)`` and Jacobians ``(m, n_L, n_0)``; boundary is the identity."""
    y, cache = forward(net, X)
    y = y.reshape(y.shape[0], -1)
    k = net.n_outputs
    boundary = np.broadcast_to(np.eye(k), (y.shape[0], k, k))
    jac, _, _ = _backward(net, cache, boundary)
    return y, jac


# --- loss ------------------------------------------------------------------------

def derivative_column_weights(Z, lam=1.0) -> np.ndarray:
    """Default ``c_j = 1 / mean(Z_j^2)``.

    Raises:
        ReweightingError: a column is identically zero while ``lam > 0``.
    """
    ms = np.mean(np.asarray(Z, dtype=float) ** 2, axis=0)
    if lam > 0 and np.any(ms <= 1e-300):
        bad = np.flatnonzero(ms <= 1e-300).tolist()
        raise ReweightingError(f"differential column(s) {bad} are zero; drop them with differential PCA")
    with np.errstate(divide="ignore"):
        return np.where(ms > 1e-300, 1.0 / ms, 0.0)


def loss(net: MLP, X, Y, Z=None, lam=1.0, column_weights=None, sample_weights=None,
         value_weight=1.0, need_grad=True, y_offset=None, xbar_offset=None, output_adjoints=False):
    """Combined value and differential cost and its gradient.

    Args:
        net: single-output network.
        X, Y, Z: batch of normalized inputs, labels and differential labels.
        lam: weight of the differential term; 0 gives classic training.
        column_weights: ``c_j``; defaults to :func:`derivative_column_weights` of ``Z``.
        sample_weights: per-example weights ``w_i`` (default 1).
        value_weight: weight ``v`` of the value term; 0 trains on differentials only.
        need_grad: also return gradients.
        y_offset, xbar_offset: terms added to the network value and gradient
            before the cost (used by wide-and-deep models).
        output_adjoints: also return ``dC/dy`` and ``dC/dx_bar``.

    Returns:
        ``C`` and, with ``need_grad``, a list of gradients aligned with
        ``net.params()`` (all weights, then all biases).
    """
    if lam < 0:
        raise ConfigurationError("lam must be nonnegative")
    X = _check_input(net, X)
    Y = np.asarray(Y, dtype=float).reshape(-1)
    m = X.shape[0]
    om = np.ones(m) if sample_weights is None else np.asarray(sample_weights, dtype=float)
    use_diff = lam > 0
    if use_diff:
        if Z is None:
            raise ValueError("lam > 0 needs differential labels Z")
        Z = np.asarray(Z, dtype=float)
        c = derivative_column_weights(Z, lam) if column_weights is None else np.asarray(column_weights, float)
        y, xbar, cache, zbars, abars = twin_eval(net, X)
        if xbar_offset is not None:
            xbar = xbar + xbar_offset
    else:
        y, cache = forward(net, X)
    if y_offset is not None:
        y = y + y_offset
    r = y - Y
    C = value_weight * np.sum(om * r * r) / m
    if use_diff:
        d = xbar - Z
        C += lam * np.sum(om[:, None] * c * d * d) / m
    if not need_grad:
        return float(C)

    L = len(net.weights)
    gW = [np.zeros_like(w) for w in net.weights]
    gb = [None] * L
    gz = [None] * L  # adjoints of z_l, index l-1
    g_xbar = None
    if use_diff:
        dg, d2g = net.activation.dg, net.activation.d2g
        g_abar = g_xbar = 2.0 * lam * om[:, None] * c * d / m  # adjoint of abar_0 = x_bar
        for l in range(1, L + 1):
            w = net.weights[l - 1]
            zbar = zbars[l - 1]
            gW[l - 1] += g_abar.T @ zbar
            g_zbar = g_abar @ w
            if l == L:
                break
            z = cache.z[l - 1]
            g_abar = g_zbar * dg(z)
            gz[l - 1] = g_zbar * abars[l] * d2g(z)
    top = (2.0 * value_weight * om * r / m)[:, None]
    gz[L - 1] = top if gz[L - 1] is None else gz[L - 1] + top
    dg = net.activation.dg
    for l in range(L, 0, -1):
        w = net.weights[l - 1]
        g = gz[l - 1]
        gW[l - 1] += cache.a[l - 1].T @ g
        gb[l - 1] = g.sum(axis=0)
        if l > 1:
            ga = g @ w.T
            gl = ga * dg(cache.z[l - 2])
            gz[l - 2] = gl if gz[l - 2] is None else gz[l - 2] + gl
    if output_adjoints:
        return float(C), gW + gb, top[:, 0], g_xbar
    return float(C), gW + gb


# --- training -------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and cost settings.

    The learning rate follows a one-cycle schedule: linear warmup from
    ``lr_min`` to ``lr_max`` over the first ``warmup_fraction`` of the steps,
    then cosine decay to ``lr_final``. ``lr_min`` defaults to ``lr_max/10``
    and ``lr_final`` to ``lr_max/100``.

    With ``batches_per_epoch`` set, the batch size grows to
    ``max(batch_size, m // batches_per_epoch)`` on large sets.
    Early stopping is on when ``patience`` is set: ``validation_fraction`` of
    the examples are held out and the best-validation weights are returned.
    """

    lam: float = 1.0
    value_weight: float = 1.0
    batch_size: int = 256
    batches_per_epoch: Optional[int] = None
    epochs: int = 100
    lr_max: float = 0.01
    lr_min: Optional[float] = None
    lr_final: Optional[float] = None
    warmup_fraction: float = 0.3
    seed: int = 0
    validation_fraction: float = 0.1
    patience: Optional[int] = None
    column_weights: Optional[tuple] = None

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError("lam must be nonnegative")
        if self.value_weight < 0 or (self.value_weight == 0 and self.lam == 0):
            raise ConfigurationError("value_weight must be >= 0 and the cost cannot be empty")
        lo = self.start_lr
        if not (self.lr_max >= lo > 0):
            raise ConfigurationError("need lr_max >= lr_min > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be positive")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigurationError("warmup_fraction must be in [0, 1)")
        if self.patience is not None and not 0 < self.validation_fraction < 1:
            raise ConfigurationError("validation_fraction must be in (0, 1)")

    @property
    def start_lr(self) -> float:
        return self.lr_max / 10 if self.lr_min is None else self.lr_min

    @property
    def end_lr(self) -> float:
        return self.lr_max / 100 if self.lr_final is None else self.lr_final

    @property
    def run_label(self) -> str:
        if self.lam == 0:
            return "classic"
        return "differential-only" if self.value_weight == 0 else "twin"

    def effective_batch(self, m: int) -> int:
        b = self.batch_size if self.batches_per_epoch is None else max(self.batch_size, m // self.batches_per_epoch)
        return max(1, min(b, m))


def one_cycle_lr(step: int, total: int, cfg: TrainConfig) -> float:
    """Learning rate at ``step`` out of ``total``."""
    frac = step / max(total, 1)
    lo, hi, end = cfg.start_lr, cfg.lr_max, cfg.end_lr
    w = cfg.warmup_fraction
    if frac < w:
        return lo + (hi - lo) * frac / w
    t = (frac - w) / (1.0 - w)
    return end + 0.5 * (hi - end) * (1.0 + math.cos(math.pi * min(t, 1.0)))


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads, lr):
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainLog:
    run_label: str
    epochs: list = field(default_factory=list)  # dicts: epoch, train_loss, val_loss, lr
    best_epoch: Optional[int] = None
    stopped_early: bool = False


def _loss_of(net, ts, idx, cfg, c, weights, loss_fn, need_grad):
    Z = None if ts.Z is None else ts.Z[idx]
    w = None if weights is None else weights[idx]
    return loss_fn(net, ts.X[idx], ts.Y[idx], Z, cfg.lam, c, w, cfg.value_weight, need_grad)


def train(net, ts, cfg: TrainConfig = TrainConfig(), sample_weights=None, loss_fn=None):
    """Train ``net`` in place with Adam on mini-batches; returns ``(net, log)``.

    ``net`` is an :class:`MLP` or any object exposing ``params()`` (arrays
    updated in place) and ``copy()``, together with a matching ``loss_fn``.
    Derivative column weights are computed once on the training examples.

    Raises:
        DivergenceError: a non-finite loss, with the epoch and batch index.
    """
    loss_fn = loss if loss_fn is None else loss_fn
    if cfg.lam > 0 and ts.Z is None:
        raise ValueError("differential training needs Z")
    split_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    m = ts.m
    weights = None if sample_weights is None else np.asarray(sample_weights, dtype=float)
    if cfg.patience is not None:
        perm = np.random.default_rng(split_seq).permutation(m)
        n_val = max(1, int(round(cfg.validation_fraction * m)))
        val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    else:
        val_idx, train_idx = None, np.arange(m)
    if cfg.lam > 0:
        c = (derivative_column_weights(ts.Z[train_idx], cfg.lam) if cfg.column_weights is None
             else np.asarray(cfg.column_weights, dtype=float))
    else:
        c = None
    batch = cfg.effective_batch(train_idx.size)
    n_batches = -(-train_idx.size // batch)
    total = n_batches * cfg.epochs
    rng = np.random.default_rng(shuffle_seq)
    params = net.params()
    opt = Adam(params)
    log = TrainLog(cfg.run_label)
    best, best_val, since_best = None, np.inf, 0
    step = 0
    for epoch in range(cfg.epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        for b in range(n_batches):
            idx = order[b * batch:(b + 1) * batch]
            lr = one_cycle_lr(step, total, cfg)
            C, grads = _loss_of(net, ts, idx, cfg, c, weights, loss_fn, True)
            if not np.isfinite(C) or not all(np.all(np.isfinite(g)) for g in grads):
                raise DivergenceError("non-finite loss", epoch, b)
            opt.step(params, grads, lr)
            step += 1
        train_loss = _loss_of(net, ts, train_idx, cfg, c, weights, loss_fn, False)
        if not np.isfinite(train_loss):
            raise DivergenceError("non-finite loss", epoch, n_batches - 1)
        entry = {"epoch": epoch, "train_loss": train_loss, "val_loss": None, "lr": lr}
        if val_idx is not None:
            val = _loss_of(net, ts, val_idx, cfg, c, weights, loss_fn, False)
            entry["val_loss"] = val
            if val < best_val:
                best_val, best, since_best = val, net.copy(), 0
                log.best_epoch = epoch
            else:
                since_best += 1
        log.epochs.append(entry)
        if val_idx is not None and since_best >= cfg.patience:
            log.stopped_early = True
            break
    if best is not None:
        for p, q in zip(net.params(), best.params()):
            p[...] = q
    return net, log


def match_means(net: MLP, X, Y) -> float:
    """Shift the output bias so mean predictions equal mean labels.

    Used after training on differentials only, which leaves the level free.
    Returns the applied shift.
    """
    y, _ = forward(net, X)
    shift = float(np.mean(np.asarray(Y, dtype=float) - y))
    net.biases[-1] += shift
    return shift
