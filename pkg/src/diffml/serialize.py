"""Text serialization of fitted objects.

Files are JSON documents with a ``schema_version`` field. Arrays are stored
as ``{"shape": [...], "data": "v v v"}`` with every value formatted to 17
significant digits, which round-trips 64-bit floats exactly.
"""
from __future__ import annotations

import json

import numpy as np

SCHEMA_VERSION = 1


class SchemaError(ValueError):
    """A serialized document has the wrong kind or version."""


def encode_array(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": " ".join(format(v, ".17g") for v in a.ravel())}


def decode_array(d) -> np.ndarray:
    data = d["data"].split()
    return np.array([float(v) for v in data], dtype=float).reshape(d["shape"])


def encode_float(x) -> str:
    return format(float(x), ".17g")


def dump(path, kind: str, payload: dict):
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, **payload}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")


def load(path, kind=None) -> dict:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema version {doc.get('schema_version')!r}")
    if kind is not None and doc.get("kind") != kind:
        raise SchemaError(f"{path}: expected a {kind!r} document, found {doc.get('kind')!r}")
    return doc
