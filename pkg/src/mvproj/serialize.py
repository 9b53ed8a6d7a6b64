"""JSON helpers: matrices with explicit shape fields, canonical dumps, hashing.

Floats survive a JSON round trip bit-exactly (shortest round-trip repr), so
serialized state restores to byte-identical arrays.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import CheckpointError


def matrix_to_json(arr: np.ndarray) -> dict:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise CheckpointError(f"cannot serialize array of shape {arr.shape}")
    return {"rows": int(a.shape[0]), "cols": int(a.shape[1]), "data": a.ravel().tolist()}


def matrix_from_json(obj: dict) -> np.ndarray:
    try:
        rows, cols, data = obj["rows"], obj["cols"], obj["data"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed matrix object: {exc}") from exc
    a = np.asarray(data, dtype=np.float64)
    if a.size != rows * cols:
        raise CheckpointError(f"matrix data length {a.size} != {rows}x{cols}")
    return a.reshape(rows, cols)


def vector_from_json(obj: dict) -> np.ndarray:
    return matrix_from_json(obj).ravel()


def canonical_dumps(obj) -> str:
    """Deterministic JSON encoding (sorted keys, fixed separators)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def stable_hash(obj) -> str:
    return hashlib.sha256(canonical_dumps(obj).encode("utf-8")).hexdigest()
