"""Exact GP regression on one-hot targets, argmax classification and Gram file I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .errors import DataError, NumericError

JITTER_START = 1e-10
JITTER_CEILING = 1e-2
JITTER_STEP = 10.0
RESIDUAL_TOL = 1e-6

GRAM_MAGIC = b"CGPK"
GRAM_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def encode_targets(labels, num_classes: int) -> np.ndarray:
    """``+1`` at the label's column and ``-1`` elsewhere."""
    labels = np.asarray(labels)
    if num_classes < 1:
        raise DataError("num_classes must be positive")
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer) and labels.size:
        raise DataError("labels must be a 1-D integer sequence")
    labels = labels.astype(np.int64)
    bad = (labels < 0) | (labels >= num_classes)
    if bad.any():
        raise DataError(f"label {labels[bad][0]} outside [0, {num_classes})")
    y = -np.ones((labels.size, num_classes))
    y[np.arange(labels.size), labels] = 1.0
    return y


@dataclass
class Solution:
    alpha: np.ndarray
    jitter: float  # absolute value added to the diagonal
    residual: float  # ||(K + jitter I) alpha - Y||_inf / ||Y||_inf
    attempts: int


def _check_square(k: np.ndarray) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise DataError(f"kernel matrix must be square, got shape {k.shape}")
    return k


def _attempt(k: np.ndarray, y: np.ndarray, jitter: float):
    kj = k + jitter * np.eye(k.shape[0])
    try:
        factor = scipy.linalg.cho_factor(kj, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return None, np.inf
    alpha = scipy.linalg.cho_solve(factor, y, check_finite=False)
    if not np.all(np.isfinite(alpha)):
        return None, np.inf
    ynorm = np.max(np.abs(y)) if y.size else 1.0
    res = np.max(np.abs(kj @ alpha - y)) / (ynorm or 1.0) if y.size else 0.0
    return alpha, res


def solve(k_xx, y, jitter: float | None = None, escalate: bool = True) -> Solution:
    """Solve ``(K + jI) alpha = Y`` by Cholesky.

    ``jitter=None`` starts the ladder at ``1e-10 * mean(diag K)``.  On failure
    of the factorisation, or a residual above ``1e-6 * ||Y||_inf``, the
    jitter is multiplied by 10 until ``1e-2 * mean(diag K)``.  An explicit
    jitter of 0 is tried as is; escalation from 0 jumps to the ladder start.
    """
    k = _check_square(k_xx)
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] != k.shape[0]:
        raise DataError(f"targets have {y.shape[0]} rows, kernel has {k.shape[0]}")
    if not np.all(np.isfinite(k)):
        raise NumericError("kernel matrix contains non-finite values")
    scale = float(np.mean(np.diag(k))) if k.size else 1.0
    if scale <= 0:
        scale = 1.0
    start, ceiling = JITTER_START * scale, JITTER_CEILING * scale
    j = start if jitter is None else float(jitter)
    if j < 0:
        raise DataError("jitter must be nonnegative")
    attempts = 0
    while True:
        attempts += 1
        alpha, res = _attempt(k, y, j)
        if alpha is not None and res <= RESIDUAL_TOL:
            return Solution(alpha, j, float(res), attempts)
        if not escalate:
            break
        nxt = start if j < start else j * JITTER_STEP
        if nxt > ceiling * (1 + 1e-12):
            break
        j = nxt
    raise NumericError(
        f"kernel solve failed: no jitter up to {ceiling:.3g} (1e-2 x mean diagonal) gave a "
        f"Cholesky factor with residual <= {RESIDUAL_TOL:g}; last jitter tried {j:.3g}"
    )


def predict(k_star, alpha) -> np.ndarray:
    """Row-wise argmax of ``K_star @ alpha``; ties go to the smallest class index."""
    k_star = np.asarray(k_star, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if k_star.ndim != 2 or alpha.ndim != 2 or k_star.shape[1] != alpha.shape[0]:
        raise DataError(f"cannot multiply {k_star.shape} by {alpha.shape}")
    return np.argmax(k_star @ alpha, axis=1)  # argmax returns the first maximum


def error_rate(predicted, truth) -> float:
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape:
        raise DataError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    if predicted.size == 0:
        raise DataError("cannot score an empty prediction")
    return float(np.mean(predicted != truth))


def write_gram(path: str | Path, k) -> None:
    """Header ``CGPK``, version, rows, cols (little-endian u32), then row-major f64."""
    k = np.asarray(k, dtype="<f8")
    if k.ndim != 2:
        raise DataError("Gram matrix must be 2-D")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(GRAM_MAGIC, GRAM_VERSION, k.shape[0], k.shape[1]))
        f.write(np.ascontiguousarray(k).tobytes())


def read_gram(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated Gram header")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != GRAM_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {GRAM_MAGIC!r}")
    if version != GRAM_VERSION:
        raise DataError(f"{path}: unsupported Gram file version {version}")
    expected = _HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {rows}x{cols}, found {len(data)}")
    return np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(rows, cols).astype(np.float64)
