"""Fitted pricing approximators in original units.

An :class:`Approximator` bundles an optional preprocessing pipeline with a
trained model (twin or classic net, wide-and-deep net, polynomial regression,
or the closed-form oracle itself) and predicts values and deltas for raw
states. Everything round-trips through one text file.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import diffreg, market, serialize, twinnet, widedeep
from .preprocess import PreprocessPipeline, pipeline_fit

KINDS = ("twin", "classic", "diffreg", "ridge", "widedeep", "oracle")


@dataclass
class FitSettings:
    """Everything needed to fit one approximator kind.

    Args:
        kind: one of :data:`KINDS` (``oracle`` is not fitted, only built).
        train: optimizer settings for network kinds.
        hidden: hidden layer widths.
        activation: hidden activation name.
        pca, diffpca: preprocessing stages; differential PCA is skipped for
            kinds trained without differentials.
        epsilon, epsilon_prime, centred: preprocessing thresholds and flag.
        degree: polynomial degree for regression kinds.
        ridge_validation_fraction: share of examples held out to pick ridge lambda.
        wide: wide basis for ``widedeep``.
        edges: enable asymptotic control for ``widedeep`` (needs market objects).
        edge_k, edge_weight: edge count (default m/64) and loss multiplier.
        init_seed: weight initialization seed.
    """

    kind: str = "twin"
    train: twinnet.TrainConfig = field(default_factory=twinnet.TrainConfig)
    hidden: tuple = (20, 20, 20, 20)
    activation: str = "softplus"
    pca: bool = True
    diffpca: bool = True
    epsilon: Optional[float] = None
    epsilon_prime: float = 1e-4
    centred: bool = False
    degree: int = 5
    ridge_validation_fraction: float = 0.2
    wide: str = "identity+squares"
    edges: bool = False
    edge_k: Optional[int] = None
    edge_weight: float = 10.0
    init_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown approximator kind {self.kind!r}; expected one of {KINDS}")

    @property
    def uses_differentials(self) -> bool:
        if self.kind in ("classic", "ridge"):
            return False
        if self.kind in ("twin", "widedeep"):
            return self.train.lam > 0
        return self.kind == "diffreg"


class Approximator:
    def __init__(self, kind, model, pipeline: Optional[PreprocessPipeline] = None, info=None):
        self.kind, self.model, self.pipeline = kind, model, pipeline
        self.info = dict(info or {})

    def predict(self, X):
        """Values ``(m,)`` and deltas ``(m, n)`` in original units."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.kind == "oracle":
            return market.closed_form_price(self.model[0], self.model[1], X)
        x = X if self.pipeline is None else self.pipeline.transform(X)[0]
        if isinstance(self.model, twinnet.MLP):
            y, g = twinnet.twin_eval(self.model, x)[:2]
        elif isinstance(self.model, widedeep.WideDeepNet):
            y, g = widedeep.wd_twin_eval(self.model, x)[:2]
        else:
            y, g = self.model.predict_with_gradient(x)
        if self.pipeline is None:
            return y, g
        return self.pipeline.invert_prediction(y, g)

    def to_dict(self) -> dict:
        if self.kind == "oracle":
            raise ValueError("the oracle approximator is not serializable")
        return {"approximator_kind": self.kind, "info": self.info,
                "pipeline": None if self.pipeline is None else self.pipeline.to_dict(),
                "model": self.model.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "Approximator":
        kind = d["approximator_kind"]
        if kind in ("twin", "classic"):
            model = twinnet.MLP.from_dict(d["model"])
        elif kind == "widedeep":
            model = widedeep.WideDeepNet.from_dict(d["model"])
        elif kind in ("diffreg", "ridge"):
            model = diffreg.RegressionModel.from_dict(d["model"])
        else:
            raise serialize.SchemaError(f"unknown approximator kind {kind!r}")
        pipe = None if d["pipeline"] is None else PreprocessPipeline.from_dict(d["pipeline"])
        return cls(kind, model, pipe, d.get("info"))

    def save(self, path):
        serialize.dump(path, "approximator", self.to_dict())

    @classmethod
    def load(cls, path) -> "Approximator":
        return cls.from_dict(serialize.load(path, "approximator"))


def oracle(model, payoff) -> Approximator:
    """The closed-form price itself, wrapped as an approximator."""
    return Approximator("oracle", (model, payoff))


def fit(ts: market.TrainingSet, s: FitSettings, model=None, payoff=None) -> Approximator:
    """Preprocess ``ts`` and fit the approximator described by ``s``.

    ``model`` and ``payoff`` are only needed for wide-and-deep asymptotic
    control, which relabels edge examples with forward-path labels.
    """
    diff = s.uses_differentials
    if diff and ts.Z is None:
        raise ValueError(f"{s.kind} needs differential labels")
    cfg = s.train if s.kind in ("twin", "widedeep") else replace(s.train, lam=0.0, value_weight=1.0)
    work = ts if diff else market.TrainingSet(ts.X, ts.Y)
    pipe = pipeline_fit(work, use_pca=s.pca, diffpca=s.diffpca and diff, epsilon=s.epsilon,
                        epsilon_prime=s.epsilon_prime, centred=s.centred)
    t = pipe.transform_set(work)
    info = {"run_label": cfg.run_label if s.kind in ("twin", "classic", "widedeep") else s.kind,
            "input_dim": int(t.n)}
    if s.kind in ("twin", "classic"):
        net = twinnet.init_weights([t.n, *s.hidden, 1], s.init_seed, s.activation)
        net, log = twinnet.train(net, t, cfg)
        info["final_train_loss"] = log.epochs[-1]["train_loss"]
        return Approximator(s.kind, net, pipe, info)
    if s.kind == "widedeep":
        net = widedeep.init_wide_deep(t.n, s.hidden, s.wide, s.init_seed, s.activation)
        if s.edges:
            if model is None or payoff is None:
                raise ValueError("asymptotic control needs the market model and payoff")
            edge_cfg = widedeep.EdgeConfig(s.edge_k, s.edge_weight)
            res = widedeep.train_with_asymptotic_control(net, t, model, payoff, cfg, edge_cfg, pipe)
            log = res.log
            info["edges"] = int(res.edges.indices.size)
        else:
            net, log = widedeep.train_wide_deep(net, t, cfg)
        info["final_train_loss"] = log.epochs[-1]["train_loss"]
        return Approximator(s.kind, net, pipe, info)
    if s.kind == "diffreg":
        reg = diffreg.fit_poly(t.X, t.Y, t.Z, s.degree, "differential", cfg.lam if cfg.lam > 0 else 1.0)
        return Approximator(s.kind, reg, pipe, info)
    if s.kind == "ridge":
        rng = np.random.default_rng(cfg.seed)
        perm = rng.permutation(t.m)
        n_val = max(1, int(round(s.ridge_validation_fraction * t.m)))
        val, tr = np.sort(perm[:n_val]), np.sort(perm[n_val:])
        reg = diffreg.fit_poly(t.X[tr], t.Y[tr], degree=s.degree, kind="ridge",
                               X_val=t.X[val], Y_val=t.Y[val])
        info["ridge_lambda"] = reg.lam
        return Approximator(s.kind, reg, pipe, info)
    raise ValueError(f"kind {s.kind!r} cannot be fitted")
