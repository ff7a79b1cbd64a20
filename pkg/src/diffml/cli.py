"""Command-line interface: ``diffml generate | train | evaluate | reproduce``.

Exit codes: 0 success, 2 configuration error, 3 numerical error (divergence,
failed decomposition, non-finite simulation), 4 I/O error.

The thread count for BLAS and path simulation comes from ``--threads``, else
from the ``DIFFML_THREADS`` environment variable, else library defaults.
Results are reproducible bit for bit for a fixed seed and thread count.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import adjoint, approximators, experiments, market, serialize, twinnet
from .approximators import Approximator
from .config import ConfigError, ExperimentConfig, derive_seed, load_config
from .preprocess import AllIrrelevantError, DegenerateLabelError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "DIFFML_THREADS"
FIGURES = ("basket-convergence", "diffreg-vs-ridge", "asymptotics")


class OracleUnavailableError(ValueError):
    """No oracle is available for the configured payoff."""


# --- CSV helpers -----------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, rows, append=False):
    """Write dicts as CSV; floats with 17 significant digits."""
    if not rows:
        raise ValueError("no rows to write")
    path = Path(path)
    fields = list(rows[0])
    new = not (append and path.exists() and path.stat().st_size)
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in r.items()})


def read_csv(path):
    """Rows as dicts; values parsed as int, float or bool where possible."""
    def parse(s):
        if s in ("true", "false"):
            return s == "true"
        for cast in (int, float):
            try:
                return cast(s)
            except ValueError:
                pass
        return s
    with open(path, newline="") as f:
        return [{k: parse(v) for k, v in row.items()} for row in csv.DictReader(f)]


def _thread_count(args):
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from exc
        if n < 1:
            raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        return n
    return None


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    return cfg if args.seed is None else cfg.with_seed(args.seed)


# --- commands ------------------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    model, payoff = cfg.market()
    sampling = cfg.sampling()
    t0 = time.perf_counter()
    ts = market.simulate_dataset(model, payoff, sampling, workers=args.threads_resolved or 1)
    elapsed = time.perf_counter() - t0
    market.write_dataset(args.out, ts)
    print(f"m={ts.m} n={ts.n} generation_seconds={elapsed:.3f} -> {args.out}")
    return EXIT_OK


def _train_metrics(cfg, approx, ts):
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "kind": approx.kind,
            "run_label": approx.info.get("run_label", approx.kind), "m": ts.m, "n": ts.n,
            "input_dim": approx.info.get("input_dim"),
            "final_train_loss": approx.info.get("final_train_loss", ""),
            "ridge_lambda": approx.info.get("ridge_lambda", "")}


def cmd_train(args) -> int:
    cfg = _config(args)
    model, payoff = cfg.market()
    ts = market.read_dataset(args.dataset)
    if ts.n != model.n_assets:
        raise ConfigError(f"dataset has {ts.n} inputs but the config describes {model.n_assets} assets")
    settings = cfg.fit_settings()
    t0 = time.perf_counter()
    approx = approximators.fit(ts, settings, model, payoff)
    elapsed = time.perf_counter() - t0
    approx.info["config_hash"] = cfg.config_hash()
    approx.save(args.model)
    metrics_path = args.out or f"{args.model}.metrics.csv"
    row = _train_metrics(cfg, approx, ts)
    write_csv(metrics_path, [row], append=True)
    write_csv(f"{metrics_path}.timings.csv", [{"config_hash": row["config_hash"], "seed": cfg.seed,
                                               "phase": "train", "seconds": elapsed}], append=True)
    print(f"run={row['run_label']} kind={approx.kind} m={ts.m} train_seconds={elapsed:.3f} -> {args.model}")
    return EXIT_OK


def _load_approximator(spec, model, payoff) -> Approximator:
    if spec == "oracle:closed-form":
        return approximators.oracle(model, payoff)
    return Approximator.load(spec)


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    model, payoff = cfg.market()
    ev = cfg.section("evaluation")
    if not hasattr(payoff, "pieces") and ev["oracle"] == "closed-form":
        raise OracleUnavailableError(f"no closed form for payoff {payoff.kind!r}")
    approx = _load_approximator(args.model, model, payoff)
    X = experiments.sample_test_states(model, ev["m"], derive_seed(cfg.seed, "test-data"))
    t0 = time.perf_counter()
    true_y, true_d = experiments.oracle_values(model, payoff, X, ev["oracle"], ev["inner_paths"],
                                               derive_seed(cfg.seed, "oracle"))
    t_oracle = time.perf_counter() - t0
    t0 = time.perf_counter()
    pred_y, pred_d = approx.predict(X)
    t_pred = time.perf_counter() - t0
    res = experiments.compare(pred_y, pred_d, true_y, true_d)
    report = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "kind": approx.kind,
              "oracle": ev["oracle"], "m_test": ev["m"], "value_rmse": res["value_rmse"]}
    for j, v in enumerate(res["delta_rmse"], start=1):
        report[f"delta_rmse_{j}"] = v
    report["mean_delta_rmse"] = res["mean_delta_rmse"]
    report["mc_reference_error"] = experiments.mc_reference_error(model, payoff, X, cfg.section("sampling")["m"])
    for name, v in report.items():
        if isinstance(v, float) and not np.isfinite(v):
            raise FloatingPointError(f"metric {name} is not finite")
    write_csv(args.out, [report])
    n = model.n_assets
    scatter = []
    for i in range(X.shape[0]):
        r = {f"x_{j + 1}": X[i, j] for j in range(n)}
        r.update(oracle_value=true_y[i], predicted_value=pred_y[i])
        r.update({f"oracle_delta_{j + 1}": true_d[i, j] for j in range(n)})
        r.update({f"predicted_delta_{j + 1}": pred_d[i, j] for j in range(n)})
        scatter.append(r)
    scatter_path = args.scatter or f"{args.out}.scatter.csv"
    write_csv(scatter_path, scatter)
    write_csv(f"{args.out}.timings.csv", [{"phase": "oracle", "seconds": t_oracle},
                                          {"phase": "predict", "seconds": t_pred}])
    print(f"value_rmse={res['value_rmse']:.6g} mean_delta_rmse={res['mean_delta_rmse']:.6g} "
          f"mc_reference_error={report['mc_reference_error']:.6g} -> {args.out}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    train = experiments.HEADLINE_TRAIN
    if args.epochs is not None:
        train = twinnet.TrainConfig(**{**train.__dict__, "epochs": args.epochs})
    if args.figure == "basket-convergence":
        sizes = tuple(int(s) for s in args.sizes.split(","))
        rows = experiments.basket_convergence(sizes=sizes, seeds=seeds, train=train)
    elif args.figure == "diffreg-vs-ridge":
        rows = experiments.diffreg_vs_ridge(seeds=seeds)
    else:
        rows = [r for s in seeds for r in experiments.asymptotics(seed=s)]
    path = out / f"{args.figure}.csv"
    write_csv(path, rows)
    print(f"{len(rows)} rows -> {path}")
    return EXIT_OK


# --- entry point ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffml", description="Differential machine learning toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="experiment TOML file")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        sp.add_argument("--threads", type=int, default=None,
                        help=f"thread count (default: ${THREADS_ENV} or library default)")

    g = sub.add_parser("generate", help="simulate a training set")
    common(g)
    g.add_argument("--out", required=True, help="dataset CSV to write")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit an approximator on a dataset")
    common(t)
    t.add_argument("--dataset", required=True)
    t.add_argument("--model", required=True, help="model file to write")
    t.add_argument("--out", default=None, help="metrics CSV (appended; default MODEL.metrics.csv)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a model against an oracle")
    common(e)
    e.add_argument("--model", required=True, help="model file, or oracle:closed-form")
    e.add_argument("--out", required=True, help="report CSV to write")
    e.add_argument("--scatter", default=None, help="per-example CSV (default OUT.scatter.csv)")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("reproduce", help="run a scripted experiment matrix")
    common(r, config=False)
    r.add_argument("--figure", required=True, choices=FIGURES)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seeds", default="0,1,2")
    r.add_argument("--sizes", default="1024,8192,65536", help="training sizes (basket-convergence)")
    r.add_argument("--epochs", type=int, default=None, help="override training epochs")
    r.set_defaults(func=cmd_reproduce)
    return p


NUMERIC_ERRORS = (twinnet.DivergenceError, np.linalg.LinAlgError, adjoint.DomainError,
                  market.SimulationError, FloatingPointError, DegenerateLabelError, AllIrrelevantError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        threads = _thread_count(args)
        args.threads_resolved = threads
        limits = threadpool_limits(limits=threads) if threads else nullcontext()
        with limits:
            return args.func(args)
    except (ConfigError, serialize.SchemaError, OracleUnavailableError, twinnet.ConfigurationError,
            market.ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERIC_ERRORS as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # remaining ValueErrors come from malformed inputs (dataset files, shapes)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
