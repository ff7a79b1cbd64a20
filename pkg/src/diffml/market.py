"""Correlated Bachelier market, basket payoffs and augmented datasets.

States ``X`` are asset prices on the horizon date ``t1``; labels ``Y`` are
payoffs sampled on ``t2`` conditional on ``X``; differential labels ``Z`` are
the pathwise derivatives ``dY/dX`` obtained by backpropagation through the
recorded payoff computation.

Rates are zero, so no discounting is applied. The Bachelier model is simulated
exactly with one Gaussian step per period.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Union

import numpy as np
from scipy.special import ndtr

from . import adjoint as ad

SCHEMA_VERSION = 1
BLOCK_SIZE = 4096  # paths per RNG substream; fixed so results do not depend on workers

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ModelError(ValueError):
    """Invalid market model (e.g. correlation not positive definite)."""


class SimulationError(RuntimeError):
    """A simulated payoff was not finite."""

    def __init__(self, msg, path_index=None):
        super().__init__(msg if path_index is None else f"{msg} (path {path_index})")
        self.path_index = path_index


@dataclass
class BachelierModel:
    """Multi-asset normal model ``dS = sigma dW`` with correlated Brownians.

    Args:
        spot: initial asset prices.
        vol: normal volatilities, in price units per sqrt(year).
        correlation: Brownian correlation matrix.
        t1: horizon (exposure) date.
        t2: payoff date.
    """

    spot: np.ndarray
    vol: np.ndarray
    correlation: np.ndarray
    t1: float
    t2: float

    def __post_init__(self):
        self.spot = np.atleast_1d(np.asarray(self.spot, dtype=float))
        n = self.spot.size
        self.vol = np.broadcast_to(np.asarray(self.vol, dtype=float), (n,)).copy()
        corr = np.asarray(self.correlation, dtype=float)
        if corr.ndim == 0:
            corr = np.full((n, n), float(corr))
            np.fill_diagonal(corr, 1.0)
        self.correlation = corr
        if corr.shape != (n, n):
            raise ModelError(f"correlation must be {n}x{n}, got {corr.shape}")
        if not np.allclose(corr, corr.T, atol=1e-12, rtol=0):
            raise ModelError("correlation must be symmetric")
        if not np.allclose(np.diag(corr), 1.0, atol=1e-12, rtol=0):
            raise ModelError("correlation must have a unit diagonal")
        try:
            self._chol_corr = np.linalg.cholesky(corr)
        except np.linalg.LinAlgError as exc:
            raise ModelError("correlation is not positive definite (Cholesky failed)") from exc
        if np.any(self.vol < 0):
            raise ModelError("volatilities must be nonnegative")
        if not 0 <= self.t1 < self.t2:
            raise ModelError(f"need 0 <= t1 < t2, got t1={self.t1}, t2={self.t2}")
        self.t1 = float(self.t1)
        self.t2 = float(self.t2)

    @property
    def n_assets(self) -> int:
        return self.spot.size

    @property
    def covariance(self) -> np.ndarray:
        return self.vol[:, None] * self.correlation * self.vol[None, :]

    @property
    def chol(self) -> np.ndarray:
        """Lower factor ``L`` with ``L L^T = covariance``."""
        return self.vol[:, None] * self._chol_corr

    def basket_vol(self, weights) -> float:
        """Normal volatility of the basket ``weights . S`` per sqrt(year)."""
        w = np.asarray(weights, dtype=float)
        return float(math.sqrt(max(w @ self.covariance @ w, 0.0)))


def random_correlation(n: int, rng) -> np.ndarray:
    """Correlation matrix from a random Gram matrix ``A A^T`` of Gaussians."""
    a = rng.standard_normal((n, n))
    g = a @ a.T
    d = 1.0 / np.sqrt(np.diag(g))
    c = d[:, None] * g * d[None, :]
    np.fill_diagonal(c, 1.0)
    return 0.5 * (c + c.T)


def random_weights(n: int, rng) -> np.ndarray:
    """Uniform(0, 1) weights normalized to sum to one."""
    w = rng.uniform(size=n)
    return w / w.sum()


def basket_setup(n_assets=7, seed=0, spot=100.0, vol=20.0, strike=110.0, t1=1.0, t2=2.0):
    """Random basket problem: correlated Bachelier model plus a basket call.

    Correlation comes from :func:`random_correlation` and weights from
    :func:`random_weights`, both drawn from ``default_rng(seed)``.
    """
    rng = np.random.default_rng(seed)
    corr = random_correlation(n_assets, rng) if n_assets > 1 else np.eye(1)
    w = random_weights(n_assets, rng)
    model = BachelierModel(np.full(n_assets, spot), vol, corr, t1, t2)
    return model, BasketCall(w, strike)


# --- payoffs -----------------------------------------------------------------
# A payoff is a function f(u) of u = basket - strike, described by polynomial
# pieces in u so that Gaussian expectations have exact closed forms.

def _check_weights(w):
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if abs(w.sum() - 1.0) > 1e-12:
        raise ValueError(f"basket weights must sum to 1, got {w.sum()!r}")
    return w


@dataclass(frozen=True, eq=False)
class BasketCall:
    """Call on ``weights . S_t2`` with strike ``strike``.

    The kink is smoothed over ``[-half_width, half_width]`` so pathwise
    differentials exist everywhere; the default width is 0.1% of the strike.
    """

    weights: np.ndarray
    strike: float
    half_width: Optional[float] = None
    asymptotics = "linear"
    kind = "basket-call"

    def __post_init__(self):
        object.__setattr__(self, "weights", _check_weights(self.weights))
        h = 1e-3 * abs(self.strike) if self.half_width is None else self.half_width
        if not h > 0:
            raise ValueError("half_width must be positive")
        object.__setattr__(self, "half_width", float(h))

    def on_tape(self, basket):
        return ad.max_smooth(basket - self.strike, self.half_width)

    def evaluate(self, basket):
        return ad.smooth_max(np.asarray(basket) - self.strike, self.half_width)

    def pieces(self):
        h = self.half_width
        return [(-h, h, np.array([h * h, 2 * h, 1.0]) / (4 * h)), (h, np.inf, np.array([0.0, 1.0]))]

    def slope_pieces(self):
        h = self.half_width
        return [(-h, h, np.array([h, 1.0]) / (2 * h)), (h, np.inf, np.array([1.0]))]


@dataclass(frozen=True, eq=False)
class SmoothedDigital:
    """Digital ``1{weights . S_t2 > strike}`` replaced by a call spread.

    The default spread half-width is 5% of the strike.
    """

    weights: np.ndarray
    strike: float
    half_width: Optional[float] = None
    asymptotics = "flat"
    kind = "smoothed-digital"

    def __post_init__(self):
        object.__setattr__(self, "weights", _check_weights(self.weights))
        h = 0.05 * abs(self.strike) if self.half_width is None else self.half_width
        if not h > 0:
            raise ValueError("half_width must be positive")
        object.__setattr__(self, "half_width", float(h))

    def on_tape(self, basket):
        return ad.indicator_smooth(basket, self.strike, self.half_width)

    def evaluate(self, basket):
        return ad.smooth_indicator(basket, self.strike, self.half_width)

    def pieces(self):
        h = self.half_width
        return [(-h, h, np.array([h, 1.0]) / (2 * h)), (h, np.inf, np.array([1.0]))]

    def slope_pieces(self):
        h = self.half_width
        return [(-h, h, np.array([1.0 / (2 * h)]))]


Payoff = Union[BasketCall, SmoothedDigital]


def make_payoff(kind: str, weights, strike, half_width=None) -> Payoff:
    kinds = {"basket-call": BasketCall, "smoothed-digital": SmoothedDigital}
    if kind not in kinds:
        raise ValueError(f"unknown payoff kind {kind!r}; expected one of {sorted(kinds)}")
    return kinds[kind](weights, strike, half_width)


# --- datasets ------------------------------------------------------------------

@dataclass
class TrainingSet:
    """Inputs ``X`` (m x n), labels ``Y`` (m,) and differentials ``Z`` (m x n)."""

    X: np.ndarray
    Y: np.ndarray
    Z: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError(f"X has {self.X.shape[0]} rows but Y has {self.Y.shape[0]}")
        if self.Z is not None:
            self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
            if self.Z.shape != self.X.shape:
                raise ValueError(f"Z shape {self.Z.shape} does not match X shape {self.X.shape}")
        for name in ("X", "Y", "Z"):
            a = getattr(self, name)
            if a is not None and not np.all(np.isfinite(a)):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.X[idx], self.Y[idx], None if self.Z is None else self.Z[idx])


@dataclass(frozen=True)
class SamplingConfig:
    """How training states and labels are sampled.

    ``vol_multiplier_to_horizon`` scales volatility between today and ``t1``
    only, spreading states wider without touching the label dynamics.
    With ``antithetic`` each example averages a path and its mirror, and ``m``
    counts pairs. In ``explicit-grid`` mode states are supplied by the caller.
    """

    m: int
    seed: int = 0
    antithetic: bool = False
    vol_multiplier_to_horizon: float = 1.0
    t0_state_mode: str = "monte-carlo-from-spot"

    def __post_init__(self):
        if self.m <= 0:
            raise ValueError("m must be positive")
        if self.vol_multiplier_to_horizon < 1.0:
            raise ValueError("vol_multiplier_to_horizon must be >= 1")
        if self.t0_state_mode not in ("monte-carlo-from-spot", "explicit-grid"):
            raise ValueError(f"unknown t0_state_mode {self.t0_state_mode!r}")


def _record_payoff(tape, payoff, states, increments, antithetic):
    """Record payoff(s) for one block on ``tape``; returns (x_vars, y_var)."""
    xs = [tape.variable(s) for s in states]

    def basket(sign):
        total = None
        for w, x, inc in zip(payoff.weights, xs, increments):
            term = (x + sign * inc) * w
            total = term if total is None else total + term
        return total

    y = payoff.on_tape(basket(1.0))
    if antithetic:
        y = (y + payoff.on_tape(basket(-1.0))) * 0.5
    return xs, y


def _labels(model, payoff, X, normals, antithetic):
    """Sampled payoffs and pathwise differentials for states ``X`` (block)."""
    inc = math.sqrt(model.t2 - model.t1) * normals @ model.chol.T
    tape = ad.Tape()
    try:
        xs, y = _record_payoff(tape, payoff, list(X.T), list(inc.T), antithetic)
    except ad.DomainError as exc:
        yy = payoff.evaluate((X + inc) @ payoff.weights)
        bad = np.flatnonzero(~np.isfinite(yy))
        raise SimulationError("non-finite payoff", int(bad[0]) if bad.size else None) from exc
    adj = ad.backpropagate(tape, y)
    Z = np.column_stack([np.broadcast_to(adj[x], (X.shape[0],)) for x in xs])
    return np.broadcast_to(y.value, (X.shape[0],)).copy(), Z


def payoff_paths(model, payoff, X, normals, antithetic=False) -> np.ndarray:
    """Plain (untaped) payoff evaluation with given Gaussian increments."""
    inc = math.sqrt(model.t2 - model.t1) * normals @ model.chol.T
    y = payoff.evaluate((X + inc) @ payoff.weights)
    if antithetic:
        y = 0.5 * (y + payoff.evaluate((X - inc) @ payoff.weights))
    return y


def path_normals(cfg: SamplingConfig, n: int):
    """Gaussian draws ``(state_normals, payoff_normals)``, both m x n.

    Block ``b`` of :data:`BLOCK_SIZE` paths draws from child ``b`` of
    ``SeedSequence(seed)``, split again into a state and a payoff stream.
    """
    out_state, out_payoff = [], []
    for r0, r1, rng_state, rng_payoff in _blocks(cfg):
        out_state.append(rng_state.standard_normal((r1 - r0, n)))
        out_payoff.append(rng_payoff.standard_normal((r1 - r0, n)))
    return np.vstack(out_state), np.vstack(out_payoff)


def _blocks(cfg):
    n_blocks = -(-cfg.m // BLOCK_SIZE)
    children = np.random.SeedSequence(cfg.seed).spawn(n_blocks)
    for b, child in enumerate(children):
        s_state, s_payoff = child.spawn(2)
        r0, r1 = b * BLOCK_SIZE, min(cfg.m, (b + 1) * BLOCK_SIZE)
        yield r0, r1, np.random.default_rng(s_state), np.random.default_rng(s_payoff)


def simulate_dataset(model: BachelierModel, payoff: Payoff, cfg: SamplingConfig,
                     states=None, workers: int = 1) -> TrainingSet:
    """Simulate an augmented training set ``(X, Y, Z)``.

    States are sampled at ``t1`` with volatility multiplied by
    ``cfg.vol_multiplier_to_horizon``; payoffs are sampled at ``t2`` with the
    unscaled model. Output is deterministic in ``cfg.seed`` whatever the
    number of ``workers``.

    Args:
        model: market model.
        payoff: basket payoff on the ``t2`` asset prices.
        cfg: sampling configuration.
        states: m x n explicit states, required in ``explicit-grid`` mode.
        workers: threads used across blocks of paths.
    """
    n = model.n_assets
    if payoff.weights.size != n:
        raise ModelError(f"payoff has {payoff.weights.size} weights for {n} assets")
    if cfg.t0_state_mode == "explicit-grid":
        if states is None:
            raise ValueError("explicit-grid mode needs explicit states")
        states = np.atleast_2d(np.asarray(states, dtype=float))
        if states.shape != (cfg.m, n):
            raise ValueError(f"states must be {(cfg.m, n)}, got {states.shape}")
    elif states is not None:
        raise ValueError("states are only accepted in explicit-grid mode")

    X = np.empty((cfg.m, n))
    Y = np.empty(cfg.m)
    Z = np.empty((cfg.m, n))
    scale = cfg.vol_multiplier_to_horizon * math.sqrt(model.t1)

    def run(block):
        r0, r1, rng_state, rng_payoff = block
        z1 = rng_state.standard_normal((r1 - r0, n))
        z2 = rng_payoff.standard_normal((r1 - r0, n))
        if states is None:
            xb = model.spot + scale * z1 @ model.chol.T
        else:
            xb = states[r0:r1]
        try:
            yb, zb = _labels(model, payoff, xb, z2, cfg.antithetic)
        except SimulationError as exc:
            raise SimulationError("non-finite payoff", None if exc.path_index is None
                                  else r0 + exc.path_index) from exc
        X[r0:r1], Y[r0:r1], Z[r0:r1] = xb, yb, zb

    blocks = list(_blocks(cfg))
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, blocks))
    else:
        for b in blocks:
            run(b)
    return TrainingSet(X, Y, Z)


# --- oracles -------------------------------------------------------------------

def bachelier_basket_price(model: BachelierModel, payoff: BasketCall, state):
    """Closed-form Bachelier price and deltas of an (unsmoothed) basket call at ``t1``.

    With basket value ``b``, ``s = sigma_b sqrt(t2 - t1)`` and ``d = (b - K)/s``:
    price ``(b - K) N(d) + s n(d)`` and deltas ``weights N(d)``. When ``s = 0``
    the price is intrinsic and the delta at the money is ``0.5 weights``.

    ``state`` may be a vector (one state) or an m x n matrix.
    """
    state = np.asarray(state, dtype=float)
    w = payoff.weights
    u = state @ w - payoff.strike
    s = model.basket_vol(w) * math.sqrt(model.t2 - model.t1)
    if s > 0:
        d = u / s
        nd = ndtr(d)
        price = u * nd + s * _INV_SQRT_2PI * np.exp(-0.5 * d * d)
    else:
        nd = np.where(u > 0, 1.0, np.where(u < 0, 0.0, 0.5))
        price = np.maximum(u, 0.0)
    deltas = np.multiply.outer(nd, w)
    return price[()] if np.ndim(price) == 0 else price, deltas


def _std_partial_moments(alpha, beta, kmax):
    """``E[xi^k 1{alpha < xi < beta}]`` for standard normal ``xi``, k = 0..kmax."""
    pa = np.where(np.isinf(alpha), 0.0, _INV_SQRT_2PI * np.exp(-0.5 * np.where(np.isinf(alpha), 0, alpha) ** 2))
    pb = np.where(np.isinf(beta), 0.0, _INV_SQRT_2PI * np.exp(-0.5 * np.where(np.isinf(beta), 0, beta) ** 2))
    a_fin = np.where(np.isinf(alpha), 0.0, alpha)
    b_fin = np.where(np.isinf(beta), 0.0, beta)
    moments = [ndtr(beta) - ndtr(alpha)]
    if kmax >= 1:
        moments.append(pa - pb)
    for k in range(2, kmax + 1):
        moments.append((k - 1) * moments[k - 2] + a_fin ** (k - 1) * pa - b_fin ** (k - 1) * pb)
    return moments


def _expect_pieces(pieces, u, s):
    """``E[f(U)]`` for ``U ~ N(u, s^2)`` and piecewise-polynomial ``f``."""
    u = np.asarray(u, dtype=float)
    total = np.zeros_like(u)
    for a, b, coeffs in pieces:
        if s == 0:
            inside = (u > a) & (u <= b)
            total = total + np.where(inside, np.polynomial.polynomial.polyval(u, coeffs), 0.0)
            continue
        k = len(coeffs) - 1
        m = _std_partial_moments((a - u) / s, (b - u) / s, k)
        # E[U^j 1] = sum_i C(j, i) u^(j-i) s^i E[xi^i 1]
        for j, c in enumerate(coeffs):
            if c == 0:
                continue
            ej = sum(math.comb(j, i) * u ** (j - i) * s ** i * m[i] for i in range(j + 1))
            total = total + c * ej
    return total


def closed_form_price(model: BachelierModel, payoff: Payoff, states):
    """Exact price and deltas of the payoff *as simulated* (smoothing included)."""
    states = np.asarray(states, dtype=float)
    u = states @ payoff.weights - payoff.strike
    s = model.basket_vol(payoff.weights) * math.sqrt(model.t2 - model.t1)
    price = _expect_pieces(payoff.pieces(), u, s)
    slope = _expect_pieces(payoff.slope_pieces(), u, s)
    return price[()] if np.ndim(price) == 0 else price, np.multiply.outer(slope, payoff.weights)


def conditional_payoff_std(model: BachelierModel, payoff: Payoff, states):
    """Standard deviation of one sampled payoff conditional on each state."""
    states = np.asarray(states, dtype=float)
    u = states @ payoff.weights - payoff.strike
    s = model.basket_vol(payoff.weights) * math.sqrt(model.t2 - model.t1)
    first = _expect_pieces(payoff.pieces(), u, s)
    squared = [(a, b, np.polynomial.polynomial.polymul(c, c)) for a, b, c in payoff.pieces()]
    second = _expect_pieces(squared, u, s)
    return np.sqrt(np.maximum(second - first ** 2, 0.0))


class NestedMCResult(NamedTuple):
    price: float
    std_error: float
    deltas: np.ndarray
    delta_std_errors: np.ndarray


def nested_mc_price(model: BachelierModel, payoff: Payoff, state, inner_paths: int,
                    seed: int = 0, antithetic: bool = False) -> NestedMCResult:
    """Monte-Carlo price and deltas at one ``t1`` state by inner simulation.

    Deltas are means of pathwise differentials. Standard errors are sample
    standard deviations over ``sqrt(inner_paths)``.
    """
    if inner_paths < 2:
        raise ValueError("inner_paths must be >= 2")
    state = np.asarray(state, dtype=float).reshape(1, -1)
    cfg = SamplingConfig(inner_paths, seed, antithetic, 1.0, "explicit-grid")
    ts = simulate_dataset(model, payoff, cfg, states=np.repeat(state, inner_paths, axis=0))
    root = math.sqrt(inner_paths)
    return NestedMCResult(float(ts.Y.mean()), float(ts.Y.std(ddof=1) / root),
                          ts.Z.mean(axis=0), ts.Z.std(axis=0, ddof=1) / root)


def forward_path_labels(model: BachelierModel, payoff: Payoff, edge_states):
    """Payoff and gradient on the forward path from each edge state.

    In the zero-rate Bachelier model the conditional forward of every asset is
    its current value, so the forward path keeps all assets at ``edge_states``.
    The result is the intrinsic value and slope, which equal the true price
    and deltas only far from the strike.
    """
    if getattr(payoff, "asymptotics", None) not in ("linear", "flat"):
        raise ValueError("forward-path labels need a payoff with linear (or flat) asymptotics")
    X = np.atleast_2d(np.asarray(edge_states, dtype=float))
    return _labels(model, payoff, X, np.zeros_like(X), False)


# --- dataset file --------------------------------------------------------------

def write_dataset(path, ts: TrainingSet):
    """Write ``m,n,schema_version`` then rows ``x_1..x_n,y,z_1..z_n`` (17 digits)."""
    Z = ts.Z if ts.Z is not None else np.zeros_like(ts.X)
    rows = np.column_stack([ts.X, ts.Y, Z])
    with open(path, "w", newline="\n") as f:
        f.write(f"{ts.m},{ts.n},{SCHEMA_VERSION}\n")
        for r in rows:
            f.write(",".join(format(v, ".17g") for v in r))
            f.write("\n")


def read_dataset(path) -> TrainingSet:
    with open(path) as f:
        header = f.readline().strip().split(",")
        try:
            m, n, version = (int(v) for v in header)
        except ValueError as exc:
            raise ValueError(f"{path}: bad header {header!r}") from exc
        if version != SCHEMA_VERSION:
            raise ValueError(f"{path}: unsupported schema version {version}")
        data = np.loadtxt(f, delimiter=",", ndmin=2) if m else np.empty((0, 2 * n + 1))
    if data.shape != (m, 2 * n + 1):
        raise ValueError(f"{path}: expected {m} rows of {2 * n + 1} values, got {data.shape}")
    return TrainingSet(data[:, :n], data[:, n], data[:, n + 1:])


def with_vol_multiplier(cfg: SamplingConfig, multiplier: float) -> SamplingConfig:
    return replace(cfg, vol_multiplier_to_horizon=multiplier)
