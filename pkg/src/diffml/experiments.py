"""Scripted experiments on the Bachelier basket and call problems.

Each function returns tidy rows (lists of dicts) ready for CSV output. Seeds
for data, initialization and shuffling are derived from one master seed per
run with :func:`diffml.config.derive_seed`.
"""
from __future__ import annotations

import math
import time
from dataclasses import replace

import numpy as np

from . import approximators, market, widedeep
from .approximators import FitSettings
from .config import derive_seed
from .diffreg import fit_poly
from .preprocess import pipeline_fit
from .twinnet import TrainConfig

HEADLINE_TRAIN = TrainConfig(epochs=100, lr_max=0.01, batches_per_epoch=16)


def sample_test_states(model, m, seed):
    """States drawn from the (unscaled) horizon distribution."""
    cfg = market.SamplingConfig(m, seed)
    z = market.path_normals(cfg, model.n_assets)[0]
    return model.spot + math.sqrt(model.t1) * z @ model.chol.T


def mc_reference_error(model, payoff, X, m_paths) -> float:
    """RMS over states of the plain Monte-Carlo standard error with ``m_paths``."""
    sd = market.conditional_payoff_std(model, payoff, X)
    return float(np.sqrt(np.mean(sd ** 2)) / math.sqrt(m_paths))


def oracle_values(model, payoff, X, oracle="closed-form", inner_paths=4096, seed=0):
    if oracle == "closed-form":
        return market.closed_form_price(model, payoff, X)
    if oracle == "nested-mc":
        ys, ds = [], []
        for i, x in enumerate(np.atleast_2d(X)):
            r = market.nested_mc_price(model, payoff, x, inner_paths, seed + i)
            ys.append(r.price)
            ds.append(r.deltas)
        return np.array(ys), np.array(ds)
    raise ValueError(f"unknown oracle {oracle!r}; expected closed-form or nested-mc")


def compare(pred_y, pred_d, true_y, true_d) -> dict:
    delta_rmse = np.sqrt(np.mean((pred_d - true_d) ** 2, axis=0))
    return {"value_rmse": float(np.sqrt(np.mean((pred_y - true_y) ** 2))),
            "delta_rmse": delta_rmse, "mean_delta_rmse": float(delta_rmse.mean())}


def train_and_score(model, payoff, kind, m, master_seed, X_test, truth, train=HEADLINE_TRAIN, **settings):
    """Simulate ``m`` examples, fit ``kind`` and score it against ``truth``."""
    ts = market.simulate_dataset(model, payoff, market.SamplingConfig(m, derive_seed(master_seed, "train-data")))
    s = FitSettings(kind=kind, train=replace(train, seed=derive_seed(master_seed, "shuffle")),
                    init_seed=derive_seed(master_seed, "init"), **settings)
    t0 = time.perf_counter()
    approx = approximators.fit(ts, s, model, payoff)
    elapsed = time.perf_counter() - t0
    y, d = approx.predict(X_test)
    out = compare(y, d, *truth)
    out.update(train_seconds=elapsed, input_dim=approx.info.get("input_dim"))
    return out


def basket_convergence(sizes=(1024, 8192, 65536), kinds=("classic", "twin"), seeds=(0, 1, 2),
                       n_assets=7, setup_seed=0, m_test=1024, train=HEADLINE_TRAIN):
    """Value and delta errors of classic and twin nets across training sizes."""
    model, payoff = market.basket_setup(n_assets, setup_seed)
    rows = []
    for seed in seeds:
        X = sample_test_states(model, m_test, derive_seed(seed, "test-data"))
        truth = market.closed_form_price(model, payoff, X)
        for m in sizes:
            for kind in kinds:
                r = train_and_score(model, payoff, kind, m, seed, X, truth, train)
                rows.append({"size": m, "kind": kind, "seed": seed, "value_rmse": r["value_rmse"],
                             "mean_delta_rmse": r["mean_delta_rmse"],
                             "mc_reference_error": mc_reference_error(model, payoff, X, m),
                             "train_seconds": r["train_seconds"]})
    return rows


def call_setup(setup_seed=0):
    """The one-asset Bachelier call (spot 100, vol 20, strike 110, t1 = 1, t2 = 2)."""
    return market.basket_setup(1, setup_seed)


def diffreg_vs_ridge(seeds=(0, 1, 2), m=8192, degree=5, m_test=4096):
    """Test errors of differential, ridge (validated) and plain polynomial regression."""
    model, payoff = call_setup()
    rows = []
    for seed in seeds:
        sim = lambda phase, size: market.simulate_dataset(
            model, payoff, market.SamplingConfig(size, derive_seed(seed, phase)))
        tr, va = sim("train-data", m), sim("validation-data", m)
        X = sample_test_states(model, m_test, derive_seed(seed, "test-data"))
        truth, _ = market.closed_form_price(model, payoff, X)
        rmse = lambda reg: float(np.sqrt(np.mean((reg.predict(X) - truth) ** 2)))
        dif = fit_poly(tr.X, tr.Y, tr.Z, degree, "differential")
        rid = fit_poly(tr.X, tr.Y, degree=degree, kind="ridge", X_val=va.X, Y_val=va.Y)
        pla = fit_poly(tr.X, tr.Y, degree=degree)
        rows.append({"seed": seed, "diffreg_rmse": rmse(dif), "ridge_rmse": rmse(rid),
                     "svd_rmse": rmse(pla), "ridge_lambda": rid.lam})
    return rows


ASYMPTOTIC_VOL_MULTIPLIER = 3.0


def asymptotic_fit(controlled: bool, seed=0, m=8192, vol_multiplier=ASYMPTOTIC_VOL_MULTIPLIER,
                   train=HEADLINE_TRAIN, edge_k=None, edge_weight=10.0):
    """Wide-and-deep fit on the one-asset call, with or without edge relabeling.

    States are oversampled with ``vol_multiplier`` in both cases, so the only
    difference between the two fits is the relabeling of edge examples.
    Returns ``(approximator, fit_result)``.
    """
    model, payoff = call_setup()
    cfg = widedeep.oversample_edges_via_vol(
        market.SamplingConfig(m, derive_seed(seed, "train-data")), vol_multiplier)
    ts = market.simulate_dataset(model, payoff, cfg)
    pipe = pipeline_fit(ts)
    t = pipe.transform_set(ts)
    net = widedeep.init_wide_deep(t.n, wide="identity", seed=derive_seed(seed, "init"))
    edge_cfg = widedeep.EdgeConfig(k=edge_k if controlled else 0, weight_multiplier=edge_weight)
    res = widedeep.train_with_asymptotic_control(
        net, t, model, payoff, replace(train, seed=derive_seed(seed, "shuffle")), edge_cfg, pipe)
    return approximators.Approximator("widedeep", res.net, pipe, {"edges": int(res.edges.indices.size)}), res


def far_states(model, k=10.0):
    """States at ``spot -+ k sigma`` with ``sigma = vol sqrt(t1)`` (horizon std)."""
    sigma = float(model.vol[0] * math.sqrt(model.t1))
    return model.spot[0] + np.array([[-k * sigma], [k * sigma]]), sigma


def asymptotics(seed=0, m=8192):
    """Slopes at ``spot -+ 10 sigma`` for several methods on the one-asset call."""
    model, payoff = call_setup()
    X, sigma = far_states(model)
    truth_y, truth_d = market.closed_form_price(model, payoff, X)
    rows = []

    def add(method, approx):
        y, d = approx.predict(X)
        rows.append({"method": method, "seed": seed, "slope_minus_10sigma": float(d[0, 0]),
                     "slope_plus_10sigma": float(d[1, 0]), "value_minus_10sigma": float(y[0]),
                     "value_plus_10sigma": float(y[1]), "true_slope_minus": float(truth_d[0, 0]),
                     "true_slope_plus": float(truth_d[1, 0]), "sigma": sigma})

    add("widedeep-edges", asymptotic_fit(True, seed, m)[0])
    add("widedeep-no-edges", asymptotic_fit(False, seed, m)[0])
    ts = market.simulate_dataset(model, payoff, market.SamplingConfig(m, derive_seed(seed, "train-data")))
    add("twin", approximators.fit(ts, FitSettings("twin", train=HEADLINE_TRAIN,
                                                  init_seed=derive_seed(seed, "init"))))
    add("diffreg-degree5", approximators.fit(ts, FitSettings("diffreg")))
    return rows
