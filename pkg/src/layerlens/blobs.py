"""Little-endian float32 blob files backing every on-disk tensor.

All numeric artifacts (model weights, activations, gradients, cluster maps,
embedding matrices) are stored as raw row-major little-endian float32 and
widened to float64 on load. Loads validate size and finiteness.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from layerlens.errors import BlobError


def write_blob(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise BlobError(f"refusing to write non-finite values to {path}")
    Path(path).write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_blob(path: str | Path, shape: tuple[int, ...]) -> np.ndarray:
    """Read a float32 blob and widen to float64, checking size and finiteness."""
    path = Path(path)
    if not path.is_file():
        raise BlobError(f"missing blob: {path}")
    raw = path.read_bytes()
    expected = math.prod(shape) * 4
    if len(raw) != expected:
        raise BlobError(
            f"blob {path.name} holds {len(raw)} bytes, expected {expected} for shape {list(shape)}"
        )
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise BlobError(f"blob {path.name} holds non-finite values")
    return arr


def stable_sum(values: np.ndarray) -> float:
    """Sum after sorting, so the result does not depend on input order."""
    return float(np.sum(np.sort(np.asarray(values, dtype=np.float64), kind="stable")))
