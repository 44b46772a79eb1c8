"""Numerically stable vector/matrix primitives shared across the package.

All routines work in double precision and are pure functions of their
inputs, so they can be called from anywhere without synchronization.
"""

from __future__ import annotations

import numpy as np

# Norms at or below this are treated as degenerate (zero) vectors.
NORM_EPS = 1e-12


def l2_normalize(v: np.ndarray, eps: float = NORM_EPS) -> tuple[np.ndarray, float, bool]:
    """L2-normalize a vector.

    Returns ``(unit, norm, degenerate)``. When the norm is at or below
    ``eps`` the unit vector falls back to the first basis vector e1 and
    the degenerate flag is set, so downstream code never sees NaNs.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("l2_normalize: input contains non-finite entries")
    norm = float(np.linalg.norm(v))
    if norm <= eps:
        unit = np.zeros_like(v)
        unit[0] = 1.0
        return unit, norm, True
    return v / norm, norm, False


def rows_normalize(mat: np.ndarray, eps: float = NORM_EPS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise L2 normalization with the same zero-guard as ``l2_normalize``.

    Returns ``(units, norms, degenerate_mask)``.
    """
    mat = np.asarray(mat, dtype=np.float64)
    if not np.all(np.isfinite(mat)):
        raise ValueError("rows_normalize: input contains non-finite entries")
    norms = np.linalg.norm(mat, axis=1)
    degenerate = norms <= eps
    safe = np.where(degenerate, 1.0, norms)
    units = mat / safe[:, None]
    if np.any(degenerate):
        units[degenerate] = 0.0
        units[degenerate, 0] = 1.0
    return units, norms, degenerate


def stable_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax; invariant to adding a constant to all logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("stable_softmax: input contains non-finite entries")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def logsumexp(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted log-sum-exp along ``axis``."""
    logits = np.asarray(logits, dtype=np.float64)
    peak = np.max(logits, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(logits - peak), axis=axis, keepdims=True)) + peak
    return np.squeeze(out, axis=axis)


def cosine_logits(x_unit: np.ndarray, prototypes_unit: np.ndarray) -> np.ndarray:
    """Cosine similarities between unit embeddings and unit prototype rows.

    ``x_unit`` may be a single vector (d,) or a batch (n, d);
    ``prototypes_unit`` is (c, d). Output values lie in [-1, 1] up to
    roundoff.
    """
    x_unit = np.asarray(x_unit, dtype=np.float64)
    prototypes_unit = np.asarray(prototypes_unit, dtype=np.float64)
    if x_unit.shape[-1] != prototypes_unit.shape[-1]:
        raise ValueError(
            f"cosine_logits: dimension mismatch {x_unit.shape[-1]} vs {prototypes_unit.shape[-1]}"
        )
    return x_unit @ prototypes_unit.T


def softplus(x: np.ndarray | float) -> np.ndarray | float:
    """log(1 + e^x), computed without overflow for large x."""
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    """Logistic function, stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out
