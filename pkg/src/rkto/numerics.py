"""Scalar and vector primitives shared by the policy, reward and trainer code.

Everything here is float64 and side-effect free.
"""
import numpy as np

from .exceptions import DimensionError, InvalidInputError, NonFiniteError

KL_FLOOR = 1e-12


def _as_finite(x, name):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def softmax(logits, axis=-1):
    """Numerically stable softmax along ``axis``."""
    z = _as_finite(logits, "logits")
    if z.size == 0 or z.shape[axis] == 0:
        raise InvalidInputError("softmax needs at least one logit")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = _as_finite(logits, "logits")
    if z.size == 0 or z.shape[axis] == 0:
        raise InvalidInputError("log_softmax needs at least one logit")
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def check_prob_dist(p, name="p", atol=1e-9):
    """Validate a probability vector and return it as a float array."""
    arr = _as_finite(p, name)
    if arr.ndim != 1 or arr.size < 1:
        raise InvalidInputError(f"{name} must be a non-empty vector")
    if np.any(arr < 0):
        raise InvalidInputError(f"{name} has negative entries")
    if abs(arr.sum() - 1.0) > atol:
        raise InvalidInputError(f"{name} sums to {arr.sum()!r}, not 1")
    return arr


def kl_divergence(p, q, floor=KL_FLOOR):
    """KL(p || q) with q floored at ``floor`` before the log.

    Terms with p == 0 contribute nothing.
    """
    p = check_prob_dist(p, "p")
    q = check_prob_dist(q, "q")
    if p.shape != q.shape:
        raise DimensionError(f"support mismatch: {p.shape} vs {q.shape}")
    nz = p > 0
    qf = np.maximum(q[nz], floor)
    return float(max(np.sum(p[nz] * (np.log(p[nz]) - np.log(qf))), 0.0))


def kl_grad(p, q, floor=KL_FLOOR):
    """Partial derivatives of KL(p || q) with respect to p and q."""
    p = np.asarray(p, dtype=np.float64)
    q = np.maximum(np.asarray(q, dtype=np.float64), floor)
    safe_p = np.where(p > 0, p, 1.0)
    dp = np.where(p > 0, np.log(safe_p) - np.log(q) + 1.0, 0.0)
    dq = -p / q
    return dp, dq


def cos_rescaled(a, b):
    """Cosine similarity mapped from [-1, 1] onto [0, 1]."""
    a = _as_finite(a, "a").ravel()
    b = _as_finite(b, "b").ravel()
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidInputError("cosine of a zero vector is undefined")
    c = float(np.dot(a / na, b / nb))
    c = min(1.0, max(-1.0, c))
    return (1.0 + c) / 2.0


def as_mask(m):
    arr = np.asarray(m)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
        raise DimensionError(f"mask must be a non-empty square grid, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise InvalidInputError("mask cells must be 0 or 1")
    return arr.astype(bool)


def iou(a, b):
    """Intersection over union of two binary grids; two empty grids score 1."""
    a = as_mask(a)
    b = as_mask(b)
    if a.shape != b.shape:
        raise DimensionError(f"grid side mismatch: {a.shape[0]} vs {b.shape[0]}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def softplus(s):
    # log1p(exp(-|s|)) + max(s, 0) stays finite for any finite s
    s = np.asarray(s, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(s))) + np.maximum(s, 0.0)


def weight_fn(s, w_max):
    """Importance weight clip(softplus(s), 0, w_max)."""
    if w_max <= 0:
        raise InvalidInputError("w_max must be positive")
    arr = _as_finite(s, "s")
    out = np.clip(softplus(arr), 0.0, w_max)
    return float(out) if out.ndim == 0 else out
