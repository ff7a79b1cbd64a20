"""Wide-and-deep networks and asymptotic control.

The output is linear in a concatenated regression layer,

    y = g(z_{L-1}) w_deep + phi(x) w_wide + b,

where ``g(z_{L-1})`` are the last hidden units of a feedforward net and
``phi`` a fixed polynomial basis. Because the output is linear in that layer,
its weights can be re-solved exactly by least squares after training, which
guarantees a training error no worse than regression on the wide basis alone.

Asymptotic control relabels the most extreme training states with their
forward-path (intrinsic) value and slope and gives them a larger loss weight,
so the approximation extrapolates with the correct slope.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import market, serialize, twinnet
from .diffreg import PolyBasis, _apply_inverse, _eigen, fit_svd
from .market import SamplingConfig, TrainingSet
from .twinnet import MLP, TrainConfig, TwinOutput


class SingularCovarianceError(np.linalg.LinAlgError):
    """Input covariance is singular; whiten the inputs (PCA) first."""


# --- wide basis ---------------------------------------------------------------------

def wide_basis(n: int, kind: str = "identity+squares", degree: int = 3) -> PolyBasis:
    """Fixed wide features.

    Args:
        kind: ``identity`` (copies of the inputs), ``identity+squares`` or
            ``poly`` (all monomials up to ``degree``).
    """
    eye = np.eye(n, dtype=int)
    if kind == "identity":
        return PolyBasis(n, 1, eye)
    if kind == "identity+squares":
        return PolyBasis(n, 2, np.vstack([eye, 2 * eye]))
    if kind == "poly":
        return PolyBasis(n, degree)
    raise ValueError(f"unknown wide basis {kind!r}")


# --- network ------------------------------------------------------------------------

class WideDeepNet:
    """Feedforward ``deep`` net (its linear output layer holds ``w_deep`` and
    the bias) plus wide weights ``w_wide`` over ``wide`` features."""

    def __init__(self, deep: MLP, wide: PolyBasis, w_wide=None):
        if deep.n_outputs != 1 or len(deep.weights) < 2:
            raise twinnet.ConfigurationError("deep part needs hidden layers and a single output")
        if wide.n != deep.n_inputs:
            raise twinnet.ConfigurationError("wide basis and deep net disagree on input width")
        self.deep, self.wide = deep, wide
        self.w_wide = np.zeros(wide.size) if w_wide is None else np.asarray(w_wide, dtype=float).copy()

    @property
    def n_inputs(self) -> int:
        return self.deep.n_inputs

    @property
    def w_deep(self) -> np.ndarray:
        return self.deep.weights[-1][:, 0]

    @property
    def output_bias(self) -> float:
        return float(self.deep.biases[-1][0])

    @property
    def output_weights(self) -> np.ndarray:
        return np.concatenate([self.w_deep, self.w_wide])

    def set_output(self, w_deep, w_wide, bias):
        self.deep.weights[-1][:, 0] = w_deep
        self.w_wide[:] = w_wide
        self.deep.biases[-1][0] = bias

    def params(self) -> list:
        return self.deep.params() + [self.w_wide]

    def copy(self) -> "WideDeepNet":
        return WideDeepNet(self.deep.copy(), self.wide, self.w_wide)

    def regression_layer(self, X) -> np.ndarray:
        """Concatenated ``[g(z_{L-1}), phi(x)]``, shape ``m x (h + p)``."""
        _, cache = twinnet.forward(self.deep, X)
        return np.hstack([cache.a[-1], self.wide.evaluate(X)])

    def predict(self, X):
        y, _ = twinnet.forward(self.deep, X)
        return y + self.wide.evaluate(X) @ self.w_wide

    def to_dict(self) -> dict:
        return {"deep": self.deep.to_dict(),
                "wide": {"n": self.wide.n, "degree": self.wide.degree,
                         "exponents": self.wide.exponents.tolist()},
                "w_wide": serialize.encode_array(self.w_wide)}

    @classmethod
    def from_dict(cls, d) -> "WideDeepNet":
        w = d["wide"]
        return cls(MLP.from_dict(d["deep"]), PolyBasis(w["n"], w["degree"], w["exponents"]),
                   serialize.decode_array(d["w_wide"]))


def init_wide_deep(n_inputs, hidden=(20, 20, 20, 20), wide="identity+squares", seed=0,
                   activation="softplus", degree=3) -> WideDeepNet:
    deep = twinnet.init_weights([n_inputs, *hidden, 1], seed, activation)
    return WideDeepNet(deep, wide_basis(n_inputs, wide, degree))


def wd_twin_eval(net: WideDeepNet, X) -> TwinOutput:
    """Values and input gradients: deep twin pass plus analytic wide derivatives."""
    out = twinnet.twin_eval(net.deep, X)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = out.y + net.wide.evaluate(X) @ net.w_wide
    g = out.x_bar + np.einsum("jmp,p->mj", net.wide.derivatives(X), net.w_wide)
    return TwinOutput(y, g, out.cache)


def wd_loss(net: WideDeepNet, X, Y, Z=None, lam=1.0, column_weights=None, sample_weights=None,
            value_weight=1.0, need_grad=True):
    """Same cost as :func:`twinnet.loss`, with gradients for ``w_wide`` appended."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    phi = net.wide.evaluate(X)
    y_off = phi @ net.w_wide
    dphi = net.wide.derivatives(X) if lam > 0 else None
    x_off = None if dphi is None else np.einsum("jmp,p->mj", dphi, net.w_wide)
    if not need_grad:
        return twinnet.loss(net.deep, X, Y, Z, lam, column_weights, sample_weights, value_weight,
                            False, y_off, x_off)
    C, grads, gy, gx = twinnet.loss(net.deep, X, Y, Z, lam, column_weights, sample_weights,
                                    value_weight, True, y_off, x_off, output_adjoints=True)
    g_wide = phi.T @ gy
    if gx is not None:
        g_wide = g_wide + np.einsum("jmp,mj->p", dphi, gx)
    return C, grads + [g_wide]


def _weighted_mse(y, Y, w=None):
    r = np.asarray(y) - np.asarray(Y)
    return float(np.mean(r * r)) if w is None else float(np.sum(w * r * r) / np.sum(w))


def resolve_output_layer(net: WideDeepNet, ts: TrainingSet, sample_weights=None,
                         threshold=None) -> WideDeepNet:
    """Replace the output weights by the least-squares fit on the regression layer.

    Hidden weights stay frozen. The solution is the eigenvalue (SVD) form
    with a pseudo-inverse; if thresholding ever makes it worse than the
    wide-only fit, the wide-only fit is used instead (deep weights zero), so
    the training MSE never exceeds that of wide-only regression.
    """
    R = net.regression_layer(ts.X)
    phi = R[:, net.deep.weights[-1].shape[0]:]
    h = R.shape[1] - phi.shape[1]
    Y = ts.Y
    if sample_weights is None:
        full, wide = fit_svd(R, Y, threshold), fit_svd(phi, Y, threshold)
    else:
        sw = np.sqrt(np.asarray(sample_weights, dtype=float))
        full, wide = _weighted_fit(R, Y, sw, threshold), _weighted_fit(phi, Y, sw, threshold)
    net.set_output(full.beta[:h], full.beta[h:], full.mu_y - full.mu_phi @ full.beta)
    if _weighted_mse(net.predict(ts.X), Y, sample_weights) > _weighted_mse(wide.predict_phi(phi), Y, sample_weights):
        net.set_output(np.zeros(h), wide.beta, wide.mu_y - wide.mu_phi @ wide.beta)
    return net


def _weighted_fit(R, Y, sw, threshold):
    """Weighted least squares via row scaling after weighted centring."""
    w = sw * sw
    mu_r = (w @ R) / w.sum()
    mu_y = float(w @ Y / w.sum())
    model = fit_svd(sw[:, None] * (R - mu_r), sw * (Y - mu_y), threshold, centre=False)
    model.mu_phi, model.mu_y = mu_r, mu_y
    return model


def regression_layer_jacobian(net: WideDeepNet, X) -> np.ndarray:
    """Derivatives of the regression layer wrt inputs, stacked ``n x m x (h + p)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    hidden = MLP(net.deep.weights[:-1], net.deep.biases[:-1], net.deep.activation)
    # the truncated net outputs z_H linearly; chain with g'(z_H) for a_H
    zH, jac = twinnet.twin_eval_multi(hidden, X)
    dA = jac * net.deep.activation.dg(zH)[:, :, None]
    return np.concatenate([np.transpose(dA, (2, 0, 1)), net.wide.derivatives(X)], axis=2)


def resolve_output_layer_differential(net: WideDeepNet, ts: TrainingSet, lam: float = 1.0,
                                      sample_weights=None, threshold=None) -> WideDeepNet:
    """Re-solve the output layer on values and differentials jointly.

    The output and its input gradient are both linear in the output weights,
    so the weighted combined cost
    ``sum_i w_i (y_i - Y_i)^2 + sum_j lam_j sum_i w_i (y_bar_ij - Z_ij)^2``
    has an exact minimizer (adjusted normal equation), with
    ``lam_j = lam^2 |Y - mean|^2 / |Z_j|^2``. Fitting slopes as well as
    values keeps the output weights from chasing label noise.
    """
    if ts.Z is None:
        raise ValueError("differential re-solve needs Z")
    R = net.regression_layer(ts.X)
    dR = regression_layer_jacobian(net, ts.X)
    w = np.ones(ts.m) if sample_weights is None else np.asarray(sample_weights, dtype=float)
    mu_r = (w @ R) / w.sum()
    mu_y = float(w @ ts.Y / w.sum())
    Rc, Yc = R - mu_r, ts.Y - mu_y
    yn = float(w @ (Yc * Yc))
    zn = w @ (ts.Z * ts.Z)
    lam_j = np.where(zn > 1e-300, lam * lam * yn / np.where(zn > 1e-300, zn, 1.0), 0.0)
    A = Rc.T @ (w[:, None] * Rc)
    rhs = Rc.T @ (w * Yc)
    for j in range(ts.n):
        if lam_j[j]:
            A += lam_j[j] * dR[j].T @ (w[:, None] * dR[j])
            rhs += lam_j[j] * dR[j].T @ (w * ts.Z[:, j])
    beta = _apply_inverse(_eigen(A, threshold), rhs)
    h = net.w_deep.size
    net.set_output(beta[:h], beta[h:], mu_y - mu_r @ beta)
    return net


# --- edges and asymptotic control -------------------------------------------------------

def train_wide_deep(net: WideDeepNet, ts: TrainingSet, cfg: TrainConfig = TrainConfig(),
                    sample_weights=None):
    """Train with :func:`wd_loss`, then re-solve the output layer.

    The re-solve fits values and differentials jointly when training used
    differentials (``cfg.lam > 0``) and values only otherwise. Returns
    ``(net, log)``.
    """
    net, log = twinnet.train(net, ts, cfg, sample_weights=sample_weights, loss_fn=wd_loss)
    if cfg.lam > 0 and ts.Z is not None:
        resolve_output_layer_differential(net, ts, cfg.lam, sample_weights)
    else:
        resolve_output_layer(net, ts, sample_weights)
    return net, log


class EdgeSet(NamedTuple):
    indices: np.ndarray
    likelihoods: np.ndarray
    weight_multiplier: float


def detect_edges(X, k: int, weight_multiplier: float = 10.0) -> EdgeSet:
    """The ``k`` examples of lowest Gaussian likelihood (largest Mahalanobis distance).

    Raises:
        SingularCovarianceError: the sample covariance is singular.
        ValueError: ``k`` above ``m / 16``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    m, n = X.shape
    if k < 0 or k > m / 16:
        raise ValueError(f"k must be in [0, m/16] = [0, {m // 16}], got {k}")
    mu = X.mean(axis=0)
    Xc = X - mu
    cov = Xc.T @ Xc / m
    ev = np.linalg.eigvalsh(cov)
    if ev[0] <= 1e-12 * max(ev[-1], 0.0) or ev[-1] <= 0:
        raise SingularCovarianceError("input covariance is singular; run PCA before edge detection")
    sol = np.linalg.solve(cov, Xc.T).T
    maha = np.einsum("ij,ij->i", Xc, sol)
    _, logdet = np.linalg.slogdet(cov)
    loglik = -0.5 * (maha + logdet + n * math.log(2 * math.pi))
    order = np.argsort(loglik, kind="stable")
    return EdgeSet(np.sort(order[:k]), loglik, float(weight_multiplier))


@dataclass(frozen=True)
class EdgeConfig:
    """Asymptotic control settings: ``k`` defaults to ``m // 64``."""

    k: Optional[int] = None
    weight_multiplier: float = 10.0

    def count(self, m: int) -> int:
        return m // 64 if self.k is None else self.k


class ControlledFit(NamedTuple):
    net: WideDeepNet
    edges: EdgeSet
    log: twinnet.TrainLog
    sample_weights: np.ndarray
    training_set: TrainingSet


def relabel_edges(ts: TrainingSet, model, payoff, edges: EdgeSet, pipeline=None):
    """Training set with forward-path labels at the edge examples, plus weights.

    ``ts`` is in raw units unless ``pipeline`` is given, in which case ``ts``
    is in pipeline coordinates and labels are mapped through it.
    """
    X, Y = ts.X.copy(), ts.Y.copy()
    Z = None if ts.Z is None else ts.Z.copy()
    idx = edges.indices
    if idx.size:
        raw = ts.X[idx] if pipeline is None else pipeline.invert_inputs(ts.X[idx])
        ye, ze = market.forward_path_labels(model, payoff, raw)
        if pipeline is not None:
            _, ye, ze = pipeline.transform(raw, ye, ze)
        Y[idx] = ye
        if Z is not None:
            Z[idx] = ze
    w = np.ones(ts.m)
    w[idx] = edges.weight_multiplier
    return TrainingSet(X, Y, Z), w


def train_with_asymptotic_control(net: WideDeepNet, ts: TrainingSet, model, payoff,
                                  cfg: TrainConfig = TrainConfig(), edge_cfg: EdgeConfig = EdgeConfig(),
                                  pipeline=None) -> ControlledFit:
    """Relabel edges with forward-path labels, then :func:`train_wide_deep`.

    With ``k = 0`` this is exactly :func:`train_wide_deep` on ``ts``.

    Args:
        net: wide-and-deep net to train in place.
        ts: training set, in ``pipeline`` coordinates when a pipeline is given.
        model, payoff: market objects supplying the forward-path labels.
        cfg: training settings.
        edge_cfg: edge count and loss weight.
        pipeline: fitted preprocessing pipeline mapping raw data to ``ts``.
    """
    edges = detect_edges(ts.X, edge_cfg.count(ts.m), edge_cfg.weight_multiplier)
    relabeled, weights = relabel_edges(ts, model, payoff, edges, pipeline)
    sw = weights if edges.indices.size else None
    net, log = train_wide_deep(net, relabeled, cfg, sw)
    return ControlledFit(net, edges, log, weights, relabeled)


def oversample_edges_via_vol(cfg: SamplingConfig, multiplier: float) -> SamplingConfig:
    """Sampling config with volatility to the horizon scaled by ``multiplier``.

    Wider states cover the asymptotic regions better, at some cost of
    accuracy in the interior where examples become sparser.
    """
    if multiplier < 1:
        raise ValueError("multiplier must be >= 1")
    return market.with_vol_multiplier(cfg, multiplier)
