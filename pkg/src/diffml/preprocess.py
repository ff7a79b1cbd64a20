"""Data preparation for differential training.

Pipeline stages, applied in order:

1. centre inputs, normalize labels, divide differentials by ``sigma_y``;
2. PCA on centred inputs: rotate, whiten and drop constant/redundant axes;
3. differential PCA: rotate onto orthogonal axes of relevance (eigenvectors
   of the differential covariance) and drop irrelevant ones.

Inputs map forward with ``x -> x M``; gradients map with ``M^{-T}`` (or the
transpose of the inverse when going back), so predictions made in the final
coordinates translate exactly back into original units.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import serialize
from .market import TrainingSet

DEFAULT_RELEVANCE_THRESHOLD = 1e-4
DEFAULT_PCA_REL_THRESHOLD = 1e-8


class DegenerateLabelError(ValueError):
    """Labels (or an input column) are constant and cannot be normalized."""


class AllIrrelevantError(ValueError):
    """Differential PCA found no relevant direction."""


class StageOrderError(RuntimeError):
    """Pipeline stages used before being fitted, or fitted out of order."""


def sym_eig(a: np.ndarray):
    """Eigen-decomposition of a symmetric matrix, eigenvalues descending.

    Each eigenvector is signed so that its largest-magnitude component is
    positive (first one on ties), making results reproducible.
    """
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    if vecs.size:
        pivot = np.argmax(np.abs(vecs), axis=0)
        signs = np.sign(vecs[pivot, np.arange(vecs.shape[1])])
        signs[signs == 0] = 1.0
        vecs = vecs * signs
    return vals, vecs


# --- normalization -------------------------------------------------------------

@dataclass
class NormalizationParams:
    mu_x: np.ndarray
    sigma_x: np.ndarray
    mu_y: float
    sigma_y: float

    def apply(self, x, y=None, z=None):
        """Map ``(x, y, z)`` to normalized units; ``y``/``z`` may be None."""
        xt = (np.asarray(x) - self.mu_x) / self.sigma_x
        yt = None if y is None else (np.asarray(y) - self.mu_y) / self.sigma_y
        zt = None if z is None else np.asarray(z) * (self.sigma_x / self.sigma_y)
        return xt, yt, zt

    def invert(self, x=None, y=None, z=None):
        """Map normalized ``(x, y, z)`` back to original units."""
        xo = None if x is None else np.asarray(x) * self.sigma_x + self.mu_x
        yo = None if y is None else self.mu_y + self.sigma_y * np.asarray(y)
        zo = None if z is None else np.asarray(z) * (self.sigma_y / self.sigma_x)
        return xo, yo, zo


def _label_stats(Y):
    Y = np.asarray(Y, dtype=float)
    if Y.size < 2:
        raise ValueError("need at least two examples")
    mu, sigma = Y.mean(), Y.std()
    if not sigma > 1e-300 or sigma <= 1e-14 * max(abs(mu), 1.0):
        raise DegenerateLabelError("labels are constant")
    return float(mu), float(sigma)


def fit_normalization(ts: TrainingSet) -> NormalizationParams:
    """Means and standard deviations (population) of inputs and labels."""
    mu_y, sigma_y = _label_stats(ts.Y)
    mu_x, sigma_x = ts.X.mean(axis=0), ts.X.std(axis=0)
    if np.any(sigma_x <= 1e-14 * np.maximum(np.abs(mu_x), 1.0)):
        bad = np.flatnonzero(sigma_x <= 1e-14 * np.maximum(np.abs(mu_x), 1.0))
        raise DegenerateLabelError(f"constant input column(s) {bad.tolist()}; filter them (e.g. with PCA)")
    return NormalizationParams(mu_x, sigma_x, mu_y, sigma_y)


# --- PCA -------------------------------------------------------------------------

@dataclass
class PCATransform:
    """``x -> (x - mu_x) P D^{-1/2}`` over the retained eigen-directions."""

    mu_x: np.ndarray
    P_tilde: np.ndarray
    D_tilde: np.ndarray
    epsilon: float

    @property
    def dim(self) -> int:
        return self.P_tilde.shape[1]

    def _check(self, a, width, what):
        a = np.asarray(a, dtype=float)
        if a.shape[-1] != width:
            raise ValueError(f"{what} has width {a.shape[-1]}, expected {width}")
        return a

    def transform_inputs(self, x):
        x = self._check(x, self.P_tilde.shape[0], "x")
        return (x - self.mu_x) @ self.P_tilde / np.sqrt(self.D_tilde)

    def transform_gradients(self, z):
        z = self._check(z, self.P_tilde.shape[0], "z")
        return z @ self.P_tilde * np.sqrt(self.D_tilde)

    def invert_inputs(self, xt):
        xt = self._check(xt, self.dim, "x")
        return (xt * np.sqrt(self.D_tilde)) @ self.P_tilde.T + self.mu_x

    def invert_gradients(self, g):
        g = self._check(g, self.dim, "gradient")
        return (g / np.sqrt(self.D_tilde)) @ self.P_tilde.T


def fit_pca(X_centred, epsilon: Optional[float] = None, mu_x=None) -> PCATransform:
    """PCA on centred inputs, dropping eigenvalues ``<= epsilon``.

    ``epsilon`` defaults to ``1e-8`` times the mean eigenvalue.
    """
    X = np.atleast_2d(np.asarray(X_centred, dtype=float))
    m, n = X.shape
    try:
        D, P = sym_eig(X.T @ X / m)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("PCA eigen-decomposition failed") from exc
    if epsilon is None:
        epsilon = DEFAULT_PCA_REL_THRESHOLD * max(D.mean(), 0.0)
    keep = D > epsilon
    if not keep.any():
        raise DegenerateLabelError("all inputs are constant")
    mu = np.zeros(n) if mu_x is None else np.asarray(mu_x, dtype=float)
    return PCATransform(mu, P[:, keep], D[keep], float(epsilon))


def transform_with_pca(t: PCATransform, x, z=None):
    """Inputs and (optionally) differentials into PCA coordinates."""
    return t.transform_inputs(x), None if z is None else t.transform_gradients(z)


# --- differential PCA -------------------------------------------------------------

@dataclass
class DiffPCATransform:
    """Rotation ``x -> x P3`` onto orthogonal, relevance-ranked directions."""

    P3_tilde: np.ndarray
    E: np.ndarray
    epsilon_prime: float
    centred: bool = False

    @property
    def dim(self) -> int:
        return self.P3_tilde.shape[1]

    def transform(self, a):
        a = np.asarray(a, dtype=float)
        if a.shape[-1] != self.P3_tilde.shape[0]:
            raise ValueError(f"width {a.shape[-1]}, expected {self.P3_tilde.shape[0]}")
        return a @ self.P3_tilde

    # inputs and differentials rotate alike since P3 is orthonormal
    transform_inputs = transform
    transform_gradients = transform

    def invert_inputs(self, a):
        return np.asarray(a, dtype=float) @ self.P3_tilde.T

    invert_gradients = invert_inputs


def fit_diff_pca(Z, epsilon_prime: float = DEFAULT_RELEVANCE_THRESHOLD,
                 centred: bool = False) -> DiffPCATransform:
    """Eigen-decomposition of ``Z^T Z / m`` keeping relevances ``> epsilon_prime``.

    With ``centred`` the covariance of ``Z - mean(Z)`` is used instead, which
    only retains nonlinear risk factors.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    m = Z.shape[0]
    Zc = Z - Z.mean(axis=0) if centred else Z
    E, Q = sym_eig(Zc.T @ Zc / m)
    keep = E > epsilon_prime
    if not keep.any():
        raise AllIrrelevantError("no direction has relevance above the threshold (degenerate payoff?)")
    return DiffPCATransform(Q[:, keep], E[keep], float(epsilon_prime), centred)


# --- full pipeline -------------------------------------------------------------------

class PreprocessPipeline:
    """Normalization, optional PCA and optional differential PCA.

    Without PCA, inputs are scaled by their standard deviation instead
    (``NormalizationParams.sigma_x``).
    """

    def __init__(self, normalization: Optional[NormalizationParams] = None,
                 pca: Optional[PCATransform] = None, diffpca: Optional[DiffPCATransform] = None,
                 use_pca: bool = True):
        self.normalization = normalization
        self.pca = pca
        self.diffpca = diffpca
        self.use_pca = use_pca

    # staged fitting ------------------------------------------------------------
    def fit_normalization(self, ts: TrainingSet):
        if self.pca is not None or self.diffpca is not None:
            raise StageOrderError("normalization must be fitted first")
        mu_y, sigma_y = _label_stats(ts.Y)
        mu_x = ts.X.mean(axis=0)
        if self.use_pca:
            sigma_x = np.ones_like(mu_x)
        else:
            sigma_x = fit_normalization(ts).sigma_x
        self.normalization = NormalizationParams(mu_x, sigma_x, mu_y, sigma_y)
        return self

    def fit_pca(self, ts: TrainingSet, epsilon=None):
        if self.normalization is None:
            raise StageOrderError("fit normalization before PCA")
        if self.diffpca is not None:
            raise StageOrderError("PCA must be fitted before differential PCA")
        if not self.use_pca:
            raise StageOrderError("pipeline was built without PCA")
        self.pca = fit_pca(ts.X - self.normalization.mu_x, epsilon, mu_x=self.normalization.mu_x)
        return self

    def fit_diffpca(self, ts: TrainingSet, epsilon_prime=DEFAULT_RELEVANCE_THRESHOLD, centred=False):
        if self.normalization is None or (self.use_pca and self.pca is None):
            raise StageOrderError("fit normalization (and PCA) before differential PCA")
        if ts.Z is None:
            raise ValueError("differential PCA needs differential labels")
        _, _, z2 = self._stage2(ts.X, None, ts.Z)
        self.diffpca = fit_diff_pca(z2, epsilon_prime, centred)
        return self

    def fit(self, ts: TrainingSet, epsilon=None, epsilon_prime=DEFAULT_RELEVANCE_THRESHOLD,
            diffpca: bool = True, centred: bool = False):
        """Fit all enabled stages in order on ``ts``."""
        self.normalization = self.pca = self.diffpca = None
        self.fit_normalization(ts)
        if self.use_pca:
            self.fit_pca(ts, epsilon)
        if diffpca:
            self.fit_diffpca(ts, epsilon_prime, centred)
        return self

    # transforms ----------------------------------------------------------------
    def _require(self):
        if self.normalization is None:
            raise StageOrderError("pipeline is not fitted")
        if self.use_pca and self.pca is None:
            raise StageOrderError("PCA stage is not fitted")

    def _stage2(self, x, y, z):
        nrm = self.normalization
        yt = None if y is None else (np.asarray(y) - nrm.mu_y) / nrm.sigma_y
        if self.use_pca:
            xt = self.pca.transform_inputs(x)
            zt = None if z is None else self.pca.transform_gradients(z) / nrm.sigma_y
        else:
            xt, _, zt = nrm.apply(x, None, z)
        return xt, yt, zt

    @property
    def input_dim(self) -> int:
        self._require()
        return self.normalization.mu_x.size

    @property
    def output_dim(self) -> int:
        self._require()
        if self.diffpca is not None:
            return self.diffpca.dim
        return self.pca.dim if self.use_pca else self.normalization.mu_x.size

    def transform(self, x, y=None, z=None):
        """Raw ``(x, y, z)`` into training coordinates; ``y``/``z`` optional."""
        self._require()
        xt, yt, zt = self._stage2(x, y, z)
        if self.diffpca is not None:
            xt = self.diffpca.transform_inputs(xt)
            zt = None if zt is None else self.diffpca.transform_gradients(zt)
        return xt, yt, zt

    def transform_set(self, ts: TrainingSet) -> TrainingSet:
        x, y, z = self.transform(ts.X, ts.Y, ts.Z)
        return TrainingSet(x, y, z)

    def invert_inputs(self, x3):
        self._require()
        x = np.asarray(x3, dtype=float)
        if self.diffpca is not None:
            x = self.diffpca.invert_inputs(x)
        if self.use_pca:
            return self.pca.invert_inputs(x)
        return x * self.normalization.sigma_x + self.normalization.mu_x

    def invert_gradients(self, g3):
        """Gradients wrt training coordinates of a normalized prediction into
        gradients wrt raw inputs of the original-unit prediction."""
        self._require()
        g = np.asarray(g3, dtype=float)
        if self.diffpca is not None:
            g = self.diffpca.invert_gradients(g)
        if self.use_pca:
            g = self.pca.invert_gradients(g)
        else:
            g = g / self.normalization.sigma_x
        return self.normalization.sigma_y * g

    def invert_prediction(self, y3, g3=None):
        """Normalized prediction (and gradient) back to original units."""
        self._require()
        y0 = self.normalization.mu_y + self.normalization.sigma_y * np.asarray(y3, dtype=float)
        return y0, None if g3 is None else self.invert_gradients(g3)

    # serialization -----------------------------------------------------------------
    def to_dict(self) -> dict:
        self._require()
        enc, f = serialize.encode_array, serialize.encode_float
        nrm = self.normalization
        d = {"use_pca": self.use_pca,
             "normalization": {"mu_x": enc(nrm.mu_x), "sigma_x": enc(nrm.sigma_x),
                               "mu_y": f(nrm.mu_y), "sigma_y": f(nrm.sigma_y)},
             "pca": None, "diffpca": None}
        if self.pca is not None:
            d["pca"] = {"mu_x": enc(self.pca.mu_x), "P_tilde": enc(self.pca.P_tilde),
                        "D_tilde": enc(self.pca.D_tilde), "epsilon": f(self.pca.epsilon)}
        if self.diffpca is not None:
            d["diffpca"] = {"P3_tilde": enc(self.diffpca.P3_tilde), "E": enc(self.diffpca.E),
                            "epsilon_prime": f(self.diffpca.epsilon_prime), "centred": self.diffpca.centred}
        return d

    @classmethod
    def from_dict(cls, d) -> "PreprocessPipeline":
        dec = serialize.decode_array
        n = d["normalization"]
        nrm = NormalizationParams(dec(n["mu_x"]), dec(n["sigma_x"]), float(n["mu_y"]), float(n["sigma_y"]))
        pca = diff = None
        if d["pca"] is not None:
            q = d["pca"]
            pca = PCATransform(dec(q["mu_x"]), dec(q["P_tilde"]), dec(q["D_tilde"]), float(q["epsilon"]))
        if d["diffpca"] is not None:
            q = d["diffpca"]
            diff = DiffPCATransform(dec(q["P3_tilde"]), dec(q["E"]), float(q["epsilon_prime"]), q["centred"])
        return cls(nrm, pca, diff, d["use_pca"])

    def save(self, path):
        serialize.dump(path, "pipeline", self.to_dict())

    @classmethod
    def load(cls, path) -> "PreprocessPipeline":
        return cls.from_dict(serialize.load(path, "pipeline"))


def pipeline_fit(ts: TrainingSet, use_pca=True, diffpca=True, epsilon=None,
                 epsilon_prime=DEFAULT_RELEVANCE_THRESHOLD, centred=False) -> PreprocessPipeline:
    return PreprocessPipeline(use_pca=use_pca).fit(ts, epsilon, epsilon_prime, diffpca, centred)


def pipeline_transform(p: PreprocessPipeline, x, y=None, z=None):
    return p.transform(x, y, z)


def pipeline_invert_prediction(p: PreprocessPipeline, y3, g3=None):
    return p.invert_prediction(y3, g3)
