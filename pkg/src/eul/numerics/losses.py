"""Classification losses on logits, natural log, batch-mean reduction."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, _make, as_tensor


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target, reduction: str = "mean") -> Tensor:
    """Mean of ``-log softmax(logits)[target]`` over rows.

    ``logits`` may be a single row of shape ``(k,)`` with an integer target,
    or ``(n, k)`` with one target per row. ``reduction="none"`` keeps one
    value per row.
    """
    if reduction not in ("mean", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    logits = as_tensor(logits)
    z = logits.data
    single = z.ndim == 1
    if single:
        z = z[None, :]
    t = np.atleast_1d(np.asarray(target))
    if t.dtype.kind not in "iu":
        raise TypeError("targets must be integer class indices")
    n, k = z.shape
    if t.shape != (n,):
        raise ShapeError(f"{t.shape[0]} targets for {n} logit rows")
    if np.any(t < 0) or np.any(t >= k):
        raise IndexError(f"target out of range for {k} classes: {t[(t < 0) | (t >= k)][:5]}")
    logp = _log_softmax(z)
    rows = np.arange(n)
    per_row = -logp[rows, t]
    if reduction == "none":
        loss = per_row[0] if single else per_row
    else:
        loss = per_row.mean()

    def back(g):
        grad = np.exp(logp)
        grad[rows, t] -= 1.0
        if reduction == "none":
            grad *= np.reshape(g, (-1, 1))
        else:
            grad *= g / n
        return (grad[0] if single else grad,)

    return _make(loss, (logits,), back)


def kl_divergence(p_logits, q_logits: Tensor, reduction: str = "mean") -> Tensor:
    """``KL(softmax(p) || softmax(q))`` summed over classes, averaged over rows.

    The first argument is the teacher and is treated as a constant.
    ``reduction="none"`` returns one value per row instead of the mean.
    """
    if reduction not in ("mean", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    p = p_logits.data if isinstance(p_logits, Tensor) else np.asarray(p_logits, dtype=np.float64)
    q_logits = as_tensor(q_logits)
    if p.shape != q_logits.shape:
        raise ShapeError(f"kl_divergence shape mismatch: {p.shape} vs {q_logits.shape}")
    single = p.ndim == 1
    pz = p[None, :] if single else p
    qz = q_logits.data[None, :] if single else q_logits.data
    logp = _log_softmax(pz)
    logq = _log_softmax(qz)
    pp = np.exp(logp)
    n = pz.shape[0]
    per_row = (pp * (logp - logq)).sum(axis=-1)
    # exact zero when the distributions coincide; clip rounding below zero
    if reduction == "none":
        loss = np.maximum(per_row[0] if single else per_row, 0.0)
    else:
        loss = max(per_row.mean(), 0.0)

    def back(g):
        if reduction == "none":
            g = np.reshape(g, (-1, 1)) * np.ones((n, 1))
            grad = (np.exp(logq) - pp) * g
        else:
            grad = (np.exp(logq) - pp) * (g / n)
        return (grad[0] if single else grad,)

    return _make(loss, (q_logits,), back)
