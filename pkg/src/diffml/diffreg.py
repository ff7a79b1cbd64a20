"""Polynomial regression: plain (eigenvalue/SVD), ridge and differential.

All fits centre the basis matrix and labels, eigen-decompose a symmetric
``p x p`` system ``P D P^T`` and invert it only on eigenvalues above a
threshold (``1e-8`` times the mean eigenvalue by default):

* plain:        ``beta = P D^-1 P^T phi^T Y``
* ridge:        ``beta = P (D + lam^2)^-1 P^T phi^T Y``
* differential: eigen-decompose ``phi^T phi + sum_j lam_j phi_j^T phi_j`` and
  apply the inverse to ``phi^T Y + sum_j lam_j phi_j^T Z_j`` where ``phi_j``
  holds basis derivatives wrt input ``j`` and ``lam_j = lam^2 |Y|^2 / |Z_j|^2``.

Derivative columns are never centred since centring constants vanish under
differentiation.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import serialize
from .preprocess import sym_eig

MAX_BASIS_SIZE = 20000
DEFAULT_REL_THRESHOLD = 1e-8
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class BasisTooLargeError(ValueError):
    """The requested monomial basis exceeds :data:`MAX_BASIS_SIZE`."""


# --- basis --------------------------------------------------------------------------

def basis_size(n: int, degree: int) -> int:
    """Number of monomials of total degree 1..degree in ``n`` variables."""
    return math.comb(n + degree, degree) - 1


class PolyBasis:
    """Monomials ``prod_j x_j^k_j`` with ``1 <= sum k_j <= degree``.

    Columns are in graded lexicographic order: by total degree, then with
    higher powers of earlier variables first. An explicit list of
    ``exponents`` selects a subset (e.g. inputs and their squares).
    """

    def __init__(self, n: int, degree: int, exponents=None):
        if n < 1 or degree < 1:
            raise ValueError("need n >= 1 and degree >= 1")
        if exponents is not None:
            exps = np.array(exponents, dtype=int).reshape(-1, n)
            if exps.size == 0 or np.any(exps < 0) or np.any(exps.sum(axis=1) < 1) \
                    or np.any(exps.sum(axis=1) > degree):
                raise ValueError("exponents must be nonnegative with total degree in [1, degree]")
            self.n, self.degree, self.exponents = n, degree, exps
            return
        size = basis_size(n, degree)
        if size > MAX_BASIS_SIZE:
            raise BasisTooLargeError(f"{size} basis functions for n={n}, degree={degree} "
                                     f"(limit {MAX_BASIS_SIZE})")
        self.n, self.degree = n, degree
        exps = []
        for d in range(1, degree + 1):
            for combo in itertools.combinations_with_replacement(range(n), d):
                e = [0] * n
                for j in combo:
                    e[j] += 1
                exps.append(tuple(e))
        self.exponents = np.array(exps, dtype=int)

    @property
    def size(self) -> int:
        return self.exponents.shape[0]

    def _powers(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n:
            raise ValueError(f"inputs have {X.shape[1]} columns, basis expects {self.n}")
        pw = np.ones((self.degree + 1,) + X.shape)
        for k in range(1, self.degree + 1):
            pw[k] = pw[k - 1] * X
        return X, pw

    def evaluate(self, X) -> np.ndarray:
        """Basis matrix ``m x p``."""
        X, pw = self._powers(X)
        out = np.ones((X.shape[0], self.size))
        for j in range(self.n):
            out *= pw[self.exponents[:, j], :, j].T
        return out

    def derivatives(self, X) -> np.ndarray:
        """Derivatives ``d phi / d x_j`` stacked as ``n x m x p``."""
        X, pw = self._powers(X)
        m = X.shape[0]
        cols = [pw[self.exponents[:, j], :, j].T for j in range(self.n)]
        out = np.empty((self.n, m, self.size))
        for j in range(self.n):
            k = self.exponents[:, j]
            d = k * pw[np.maximum(k - 1, 0), :, j].T
            for i in range(self.n):
                if i != j:
                    d = d * cols[i]
            out[j] = d
        return out


# --- eigen solutions --------------------------------------------------------------------

@dataclass
class EigenSolution:
    P: np.ndarray
    D: np.ndarray
    retained: np.ndarray
    threshold: float


def _eigen(A, threshold=None) -> EigenSolution:
    try:
        D, P = sym_eig(A)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("regression eigen-decomposition failed") from exc
    if threshold is None:
        threshold = DEFAULT_REL_THRESHOLD * max(D.mean(), 0.0)
    return EigenSolution(P, D, D > threshold, float(threshold))


def _apply_inverse(eig: EigenSolution, rhs, shift=0.0):
    P, D, keep = eig.P, eig.D, eig.retained
    return P[:, keep] @ ((P[:, keep].T @ rhs) / (D[keep] + shift))


@dataclass
class RegressionModel:
    """Fitted linear model ``y = mu_y + (phi(x) - mu_phi) beta``.

    With a ``basis`` the model works on raw inputs, which are standardized
    with ``x_mu``/``x_sigma`` before the basis is applied. Without one it
    works on basis matrices directly (:meth:`predict_phi`).
    """

    beta: np.ndarray
    mu_y: float
    mu_phi: np.ndarray
    eig: EigenSolution
    kind: str = "plain"
    lam: float = 0.0
    lam_j: Optional[np.ndarray] = None
    basis: Optional[PolyBasis] = None
    x_mu: Optional[np.ndarray] = None
    x_sigma: Optional[np.ndarray] = None

    def predict_phi(self, Phi):
        return self.mu_y + (np.asarray(Phi) - self.mu_phi) @ self.beta

    def _std(self, X):
        return (np.atleast_2d(np.asarray(X, dtype=float)) - self.x_mu) / self.x_sigma

    def predict(self, X):
        if self.basis is None:
            raise ValueError("model was fitted on a basis matrix; use predict_phi")
        return self.predict_phi(self.basis.evaluate(self._std(X)))

    def predict_with_gradient(self, X):
        """Values and gradients wrt raw inputs, shapes ``(m,)`` and ``(m, n)``."""
        if self.basis is None:
            raise ValueError("model was fitted on a basis matrix; use predict_phi")
        xs = self._std(X)
        y = self.predict_phi(self.basis.evaluate(xs))
        g = np.einsum("jmp,p->mj", self.basis.derivatives(xs), self.beta) / self.x_sigma
        return y, g

    def to_dict(self) -> dict:
        enc = serialize.encode_array
        d = {"model_kind": self.kind, "lam": serialize.encode_float(self.lam),
             "beta": enc(self.beta), "mu_y": serialize.encode_float(self.mu_y), "mu_phi": enc(self.mu_phi),
             "eig_P": enc(self.eig.P), "eig_D": enc(self.eig.D),
             "eig_retained": [bool(b) for b in self.eig.retained],
             "eig_threshold": serialize.encode_float(self.eig.threshold),
             "lam_j": None if self.lam_j is None else enc(self.lam_j)}
        if self.basis is not None:
            d.update(basis={"n": self.basis.n, "degree": self.basis.degree,
                            "exponents": self.basis.exponents.tolist()},
                     x_mu=enc(self.x_mu), x_sigma=enc(self.x_sigma))
        return d

    @classmethod
    def from_dict(cls, d) -> "RegressionModel":
        dec = serialize.decode_array
        eig = EigenSolution(dec(d["eig_P"]), dec(d["eig_D"]), np.array(d["eig_retained"], dtype=bool),
                            float(d["eig_threshold"]))
        basis = x_mu = x_sigma = None
        if d.get("basis") is not None:
            basis = PolyBasis(d["basis"]["n"], d["basis"]["degree"], d["basis"]["exponents"])
            x_mu, x_sigma = dec(d["x_mu"]), dec(d["x_sigma"])
        return cls(dec(d["beta"]), float(d["mu_y"]), dec(d["mu_phi"]), eig, d["model_kind"],
                   float(d["lam"]), None if d["lam_j"] is None else dec(d["lam_j"]), basis, x_mu, x_sigma)

    def save(self, path):
        serialize.dump(path, "regression", self.to_dict())

    @classmethod
    def load(cls, path) -> "RegressionModel":
        return cls.from_dict(serialize.load(path, "regression"))


def _centre(Phi, Y):
    Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
    Y = np.asarray(Y, dtype=float).reshape(-1)
    if Phi.shape[0] != Y.size:
        raise ValueError(f"basis has {Phi.shape[0]} rows but Y has {Y.size}")
    mu_phi, mu_y = Phi.mean(axis=0), float(Y.mean())
    return Phi - mu_phi, Y - mu_y, mu_phi, mu_y


# --- fits ------------------------------------------------------------------------------

def fit_svd(Phi, Y, threshold=None, centre=True) -> RegressionModel:
    """Least squares by eigen-decomposition of ``phi^T phi``.

    ``Phi`` and ``Y`` are centred here (a no-op when already centred) unless
    ``centre`` is False. Eigenvalues at or below ``threshold`` are treated as
    zero, which yields the minimum-norm solution on rank-deficient bases.
    """
    if centre:
        Pc, Yc, mu_phi, mu_y = _centre(Phi, Y)
    else:
        Pc, Yc = np.atleast_2d(np.asarray(Phi, dtype=float)), np.asarray(Y, dtype=float).reshape(-1)
        mu_phi, mu_y = np.zeros(Pc.shape[1]), 0.0
    eig = _eigen(Pc.T @ Pc, threshold)
    return RegressionModel(_apply_inverse(eig, Pc.T @ Yc), mu_y, mu_phi, eig, "plain")


def fit_ridge(Phi, Y, lam: float, threshold=None) -> RegressionModel:
    """Tikhonov-regularized least squares, ``beta = P (D + lam^2)^-1 P^T phi^T Y``."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    Pc, Yc, mu_phi, mu_y = _centre(Phi, Y)
    eig = _eigen(Pc.T @ Pc, threshold)
    beta = _apply_inverse(eig, Pc.T @ Yc, lam * lam)
    return RegressionModel(beta, mu_y, mu_phi, eig, "ridge" if lam > 0 else "plain", float(lam))


class RidgeCV:
    """Validation objective ``g(lam)`` for ridge, precomputed in the eigenbasis.

    ``g(lam) = K^T Lam^-1 M Lam^-1 K - 2 K^T Lam^-1 L`` with ``K = P^T phi^T Y``,
    ``L = P^T phi_V^T Y_V`` and ``M = P^T phi_V^T phi_V P``. The validation
    MSE equals ``(|Y_V|^2 + g(lam)) / m_V``. Validation data is centred with
    the training means.
    """

    def __init__(self, Phi, Y, Phi_val, Y_val, threshold=None):
        Phi_val = np.atleast_2d(np.asarray(Phi_val, dtype=float))
        Y_val = np.asarray(Y_val, dtype=float).reshape(-1)
        if Y_val.size == 0:
            raise ValueError("validation set is empty")
        Pc, Yc, self.mu_phi, self.mu_y = _centre(Phi, Y)
        self.eig = _eigen(Pc.T @ Pc, threshold)
        keep = self.eig.retained
        P = self.eig.P[:, keep]
        self.D = self.eig.D[keep]
        Pv = Phi_val - self.mu_phi
        Yv = Y_val - self.mu_y
        self.K = P.T @ (Pc.T @ Yc)
        self.L = P.T @ (Pv.T @ Yv)
        Q = Pv @ P
        self.M = Q.T @ Q
        self.yv2 = float(Yv @ Yv)
        self.m_val = Y_val.size

    def objective(self, lam) -> float:
        a = self.K / (self.D + lam * lam)
        return float(a @ self.M @ a - 2.0 * a @ self.L)

    def validation_mse(self, lam) -> float:
        return (self.yv2 + self.objective(lam)) / self.m_val


def golden_section(f, lo, hi, iters=60):
    """Minimize ``f`` on ``[lo, hi]``; returns the best point evaluated."""
    a, b = lo, hi
    c, d = b - GOLDEN * (b - a), a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return c if fc <= fd else d


def cv_select_lambda(Phi, Y, Phi_val, Y_val, bounds=(1e-6, 1e3), iters=60, threshold=None) -> float:
    """Ridge ``lam`` minimizing validation error, by golden section over ``log lam``."""
    cv = RidgeCV(Phi, Y, Phi_val, Y_val, threshold)
    lo, hi = math.log(bounds[0]), math.log(bounds[1])
    return math.exp(golden_section(lambda t: cv.objective(math.exp(t)), lo, hi, iters))


def differential_weights(Y, Z, lam: float) -> np.ndarray:
    """``lam_j = lam^2 |Y|^2 / |Z_j|^2`` on centred ``Y``; zero for zero columns."""
    Y = np.asarray(Y, dtype=float).reshape(-1)
    Yc = Y - Y.mean()
    zn = np.sum(np.asarray(Z, dtype=float) ** 2, axis=0)
    zero = zn <= 1e-300
    if np.any(zero):
        warnings.warn(f"differential column(s) {np.flatnonzero(zero).tolist()} are zero; "
                      "their weight is set to 0", RuntimeWarning, stacklevel=2)
    with np.errstate(divide="ignore"):
        return np.where(zero, 0.0, lam * lam * (Yc @ Yc) / np.where(zero, 1.0, zn))


def fit_differential(Phi, dPhi, Y, Z, lam: float = 1.0, threshold=None, lam_j=None) -> RegressionModel:
    """Differential regression through the adjusted normal equation.

    Args:
        Phi: ``m x p`` basis matrix (centred here).
        dPhi: ``n x m x p`` basis derivatives, used uncentred.
        Y: ``m`` labels.
        Z: ``m x n`` differential labels.
        lam: overall differential weight.
        threshold: eigenvalue cut; default ``1e-8`` times the mean eigenvalue.
        lam_j: explicit per-input weights, overriding the default balancing.
    """
    dPhi = np.asarray(dPhi, dtype=float)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Pc, Yc, mu_phi, mu_y = _centre(Phi, Y)
    if dPhi.shape != (Z.shape[1],) + Pc.shape:
        raise ValueError(f"derivative stack {dPhi.shape} does not match {(Z.shape[1],) + Pc.shape}")
    lj = differential_weights(Y, Z, lam) if lam_j is None else np.asarray(lam_j, dtype=float)
    A = Pc.T @ Pc
    rhs = Pc.T @ Yc
    for j in range(Z.shape[1]):
        if lj[j] != 0:
            A = A + lj[j] * (dPhi[j].T @ dPhi[j])
            rhs = rhs + lj[j] * (dPhi[j].T @ Z[:, j])
    eig = _eigen(A, threshold)
    return RegressionModel(_apply_inverse(eig, rhs), mu_y, mu_phi, eig, "differential", float(lam), lj)


def differential_cost(model: RegressionModel, Phi, dPhi, Y, Z) -> float:
    """``|Y - y_hat|^2 + sum_j lam_j |Z_j - phi_j beta|^2`` for a differential fit."""
    r = np.asarray(Y) - model.predict_phi(Phi)
    c = r @ r
    for j, lj in enumerate(model.lam_j):
        d = np.asarray(Z)[:, j] - dPhi[j] @ model.beta
        c += lj * (d @ d)
    return float(c)


# --- raw-input regressors ---------------------------------------------------------------

def fit_poly(X, Y, Z=None, degree=5, kind="plain", lam=1.0, X_val=None, Y_val=None,
             threshold=None) -> RegressionModel:
    """Fit a polynomial regression on raw inputs.

    Inputs are standardized (per-column mean and std of ``X``) before the
    basis is applied, which keeps high-degree monomials well scaled.

    Args:
        kind: ``plain``, ``ridge`` (``lam`` chosen on ``(X_val, Y_val)`` when
            given, else ``lam`` as passed) or ``differential`` (needs ``Z``).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    basis = PolyBasis(X.shape[1], degree)
    x_mu, x_sigma = X.mean(axis=0), X.std(axis=0)
    if np.any(x_sigma <= 0):
        raise ValueError("constant input column; remove it before regression")
    xs = (X - x_mu) / x_sigma
    Phi = basis.evaluate(xs)
    if kind == "plain":
        model = fit_svd(Phi, Y, threshold)
    elif kind == "ridge":
        if X_val is not None:
            Phi_v = basis.evaluate((np.atleast_2d(X_val) - x_mu) / x_sigma)
            lam = cv_select_lambda(Phi, Y, Phi_v, Y_val, threshold=threshold)
        model = fit_ridge(Phi, Y, lam, threshold)
        model.kind = "ridge"
    elif kind == "differential":
        if Z is None:
            raise ValueError("differential regression needs Z")
        dPhi = basis.derivatives(xs)
        model = fit_differential(Phi, dPhi, Y, np.asarray(Z) * x_sigma, lam, threshold)
    else:
        raise ValueError(f"unknown regression kind {kind!r}")
    model.basis, model.x_mu, model.x_sigma = basis, x_mu, x_sigma
    return model
