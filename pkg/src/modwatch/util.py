"""Small shared helpers: seeded RNG construction and finiteness checks."""
from __future__ import annotations

import hashlib

import numpy as np

from .errors import NumericError


def seeded_rng(*entropy: int) -> np.random.Generator:
    """Build a Generator from a tuple of integers.

    The tuple feeds a SeedSequence, so (seed, epoch) and (seed, epoch + 1)
    give independent streams while staying reproducible.
    """
    return np.random.default_rng(np.random.SeedSequence([int(e) for e in entropy]))


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def sha256_bytes(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
