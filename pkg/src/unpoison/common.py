"""Seed derivation, canonical hashing, and small shared helpers.

Every random stream in the toolkit is a ``numpy.random.Generator`` built from
an explicit integer seed through :func:`rng` or :func:`child_seeds`, so any
artifact is reproducible from the seeds recorded in its manifest.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any, Iterable

import numpy as np


def rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for ``seed``, optionally forked into a named substream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def child_seeds(seed: int, n: int, *stream: int) -> list[int]:
    """Derive ``n`` independent integer seeds from ``seed``."""
    g = rng(seed, *stream)
    return [int(s) for s in g.integers(0, 2**63 - 1, size=n)]


def canonical_json(obj: Any) -> str:
    """Deterministic JSON encoding used for digests (sorted keys, repr floats)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def _jsonable(obj: Any):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"not JSON-serializable: {type(obj)!r}")


def digest_bytes(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()


def digest_arrays(meta: Any, arrays: Iterable[np.ndarray]) -> str:
    """Digest of a JSON-able header plus raw array bytes, order-sensitive."""
    h = hashlib.sha256()
    h.update(canonical_json(meta).encode())
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
