"""Experiment configuration files (TOML) with a strict schema.

Every section and key is checked against :data:`SCHEMA`; unknown keys and
wrong types are reported with the line they appear on. See the README for
the documented layout.
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Any

import numpy as np
import tomli

from . import market, twinnet
from .approximators import KINDS, FitSettings


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


_NUM = (int, float)

# section -> key -> (accepted types, default); a default of ... means required
SCHEMA: dict[str, dict[str, tuple]] = {
    "": {"seed": ((int,), 0)},
    "model": {
        "n_assets": ((int,), ...),
        "spot": (_NUM + (list,), 100.0),
        "vol": (_NUM + (list,), 20.0),
        "correlation": (_NUM + (list, str), "random"),
        "t1": (_NUM, 1.0),
        "t2": (_NUM, 2.0),
        "setup_seed": ((int,), 0),
    },
    "payoff": {
        "kind": ((str,), "basket-call"),
        "strike": (_NUM, 110.0),
        "weights": ((list, str), "random"),
        "half_width": (_NUM, None),
    },
    "sampling": {
        "m": ((int,), ...),
        "antithetic": ((bool,), False),
        "vol_multiplier": (_NUM, 1.0),
    },
    "preprocess": {
        "pca": ((bool,), True),
        "diffpca": ((bool,), True),
        "epsilon": (_NUM, None),
        "epsilon_prime": (_NUM, 1e-4),
        "centred": ((bool,), False),
    },
    "trainer": {
        "kind": ((str,), "twin"),
        "lam": (_NUM, 1.0),
        "value_weight": (_NUM, 1.0),
        "epochs": ((int,), 100),
        "batch_size": ((int,), 256),
        "batches_per_epoch": ((int,), 16),
        "lr_max": (_NUM, 0.01),
        "lr_min": (_NUM, None),
        "lr_final": (_NUM, None),
        "warmup_fraction": (_NUM, 0.3),
        "patience": ((int,), None),
        "validation_fraction": (_NUM, 0.1),
        "hidden": ((list,), [20, 20, 20, 20]),
        "activation": ((str,), "softplus"),
        "degree": ((int,), 5),
        "ridge_validation_fraction": (_NUM, 0.2),
        "wide": ((str,), "identity+squares"),
        "edges": ((bool,), False),
        "edge_k": ((int,), None),
        "edge_weight": (_NUM, 10.0),
    },
    "evaluation": {
        "m": ((int,), 1024),
        "oracle": ((str,), "closed-form"),
        "inner_paths": ((int,), 4096),
    },
}
REQUIRED_SECTIONS = ("model", "payoff", "sampling")


def derive_seed(master: int, phase: str) -> int:
    """Per-phase seed: first 8 bytes of ``sha256(f"{master}:{phase}")``.

    Phases used: ``train-data``, ``init``, ``shuffle``, ``test-data``, ``oracle``.
    Changing one phase (e.g. test-set size) leaves the others untouched.
    """
    digest = hashlib.sha256(f"{master}:{phase}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _key_lines(text: str) -> dict:
    """Map ``(section, key)`` to its 1-based line number."""
    lines, section = {}, ""
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        head = re.fullmatch(r"\[\s*([A-Za-z0-9_.-]+)\s*\]", line)
        if head:
            section = head.group(1)
            lines.setdefault((section, None), no)
            continue
        key = re.match(r"([A-Za-z0-9_-]+)\s*=", line)
        if key:
            lines.setdefault((section, key.group(1)), no)
    return lines


@dataclass
class ExperimentConfig:
    raw: dict
    source: str = "<memory>"

    def section(self, name) -> dict:
        return self.raw[name]

    @property
    def seed(self) -> int:
        return self.raw[""]["seed"]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = json.loads(json.dumps(self.raw))
        raw[""]["seed"] = int(seed)
        return ExperimentConfig(raw, self.source)

    def config_hash(self) -> str:
        """Stable hash of the normalized config (sorted-key JSON)."""
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]

    # builders ---------------------------------------------------------------------
    def market(self):
        """The (model, payoff) pair described by ``[model]`` and ``[payoff]``."""
        mc, pc = self.raw["model"], self.raw["payoff"]
        n = mc["n_assets"]
        rng = np.random.default_rng(mc["setup_seed"])
        corr = mc["correlation"]
        if corr == "random":
            corr = market.random_correlation(n, rng) if n > 1 else np.eye(1)
        elif isinstance(corr, str):
            raise ConfigError(f"model.correlation: expected 'random', a number or a matrix, got {corr!r}")
        weights = pc["weights"]
        if weights == "random":
            weights = market.random_weights(n, rng)
        elif isinstance(weights, str):
            raise ConfigError(f"payoff.weights: expected 'random' or a list, got {weights!r}")
        try:
            spot = np.broadcast_to(np.asarray(mc["spot"], dtype=float), (n,))
            model = market.BachelierModel(spot, mc["vol"], corr, mc["t1"], mc["t2"])
            payoff = market.make_payoff(pc["kind"], weights, pc["strike"], pc["half_width"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        if payoff.weights.size != n or model.n_assets != n:
            raise ConfigError(f"model has {model.n_assets} assets and payoff {payoff.weights.size} "
                              f"weights, expected n_assets = {n}")
        return model, payoff

    def sampling(self, seed=None, m=None) -> market.SamplingConfig:
        sc = self.raw["sampling"]
        seed = derive_seed(self.seed, "train-data") if seed is None else seed
        try:
            return market.SamplingConfig(sc["m"] if m is None else m, seed, sc["antithetic"],
                                         float(sc["vol_multiplier"]))
        except ValueError as exc:
            raise ConfigError(f"sampling: {exc}") from exc

    def fit_settings(self) -> FitSettings:
        tc, pc = self.raw["trainer"], self.raw["preprocess"]
        if tc["kind"] not in KINDS or tc["kind"] == "oracle":
            raise ConfigError(f"trainer.kind: expected one of {[k for k in KINDS if k != 'oracle']}, "
                              f"got {tc['kind']!r}")
        try:
            train = twinnet.TrainConfig(
                lam=float(tc["lam"]), value_weight=float(tc["value_weight"]), batch_size=tc["batch_size"],
                batches_per_epoch=tc["batches_per_epoch"], epochs=tc["epochs"], lr_max=float(tc["lr_max"]),
                lr_min=tc["lr_min"], lr_final=tc["lr_final"], warmup_fraction=float(tc["warmup_fraction"]),
                seed=derive_seed(self.seed, "shuffle"), validation_fraction=float(tc["validation_fraction"]),
                patience=tc["patience"])
            twinnet.get_activation(tc["activation"])
        except twinnet.ConfigurationError as exc:
            raise ConfigError(f"trainer: {exc}") from exc
        return FitSettings(
            kind=tc["kind"], train=train, hidden=tuple(int(h) for h in tc["hidden"]),
            activation=tc["activation"], pca=pc["pca"], diffpca=pc["diffpca"], epsilon=pc["epsilon"],
            epsilon_prime=float(pc["epsilon_prime"]), centred=pc["centred"], degree=tc["degree"],
            ridge_validation_fraction=float(tc["ridge_validation_fraction"]), wide=tc["wide"],
            edges=tc["edges"], edge_k=tc["edge_k"], edge_weight=float(tc["edge_weight"]),
            init_seed=derive_seed(self.seed, "init"))


def parse_config(text: str, source: str = "<memory>") -> ExperimentConfig:
    """Validate TOML ``text`` against :data:`SCHEMA` and fill defaults.

    Raises:
        ConfigError: syntax errors, unknown sections or keys, wrong types or
            missing required entries, with line numbers where known.
    """
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    lines = _key_lines(text)

    def where(section, key=None):
        no = lines.get((section, key))
        return f"{source}:{no}" if no else source

    raw: dict[str, Any] = {"": {}}
    for key, value in data.items():
        if isinstance(value, dict):
            if key not in SCHEMA or key == "":
                raise ConfigError(f"{where(key)}: unknown section [{key}]; "
                                  f"expected one of {sorted(k for k in SCHEMA if k)}")
            raw[key] = value
        else:
            raw[""][key] = value
    for section, keys in SCHEMA.items():
        given = raw.get(section)
        if given is None:
            if section in REQUIRED_SECTIONS:
                raise ConfigError(f"{source}: missing required section [{section}]")
            given = raw[section] = {}
        for key, value in given.items():
            if key not in keys:
                label = f"[{section}] " if section else ""
                raise ConfigError(f"{where(section, key)}: unknown key {label}{key!r}; "
                                  f"expected one of {sorted(keys)}")
            types = keys[key][0]
            if isinstance(value, bool) and bool not in types:
                raise ConfigError(f"{where(section, key)}: {key} must be {_names(types)}, got a boolean")
            if not isinstance(value, types):
                raise ConfigError(f"{where(section, key)}: {key} must be {_names(types)}, "
                                  f"got {type(value).__name__}")
        for key, (_, default) in keys.items():
            if key not in given:
                if default is ...:
                    raise ConfigError(f"{where(section)}: missing required key {key!r} in [{section}]")
                given[key] = default
    return ExperimentConfig(raw, source)


def _names(types) -> str:
    return " or ".join(sorted({t.__name__ for t in types}))


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as f:
        text = f.read().decode("utf-8")
    return parse_config(text, str(path))
