"""Loss heads over the final-layer outputs, each returning ``(loss, dlogits)``
averaged over the batch."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor

POSITIVE = 0.95
NEGATIVE = 0.05


def softmax(logits) -> Tensor:
    z = as_tensor(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> Tensor:
    z = as_tensor(logits)
    top = z.argmax(axis=-1)[..., None]
    z = z - np.take_along_axis(z, top, axis=-1)
    e = np.exp(z)
    # the max term contributes exactly 1; log1p keeps precision for confident rows
    np.put_along_axis(e, top, 0.0, axis=-1)
    return z - np.log1p(e.sum(axis=-1, keepdims=True))


def sigmoid(logits) -> Tensor:
    z = as_tensor(logits)
    # exp only ever sees non-positive arguments
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax_nll(logits, labels) -> tuple[float, Tensor]:
    z = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, M = z.shape
    if labels.shape != (B,):
        raise ValueError(f"expected {B} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= M):
        raise ValueError(f"labels must lie in [0, {M - 1}], got range [{labels.min()}, {labels.max()}]")
    rows = np.arange(B)
    loss = -float(log_softmax(z)[rows, labels].sum()) / B
    grad = softmax(z)
    grad[rows, labels] -= 1.0
    return loss, grad / B


def sigmoid_ce(logits, targets) -> tuple[float, Tensor]:
    """Binary cross-entropy per class against probability targets.

    Uses ``max(z, 0) - z*p + log1p(exp(-|z|))`` which equals
    ``-[p log s(z) + (1-p) log(1-s(z))]`` without overflow.
    """
    z = as_tensor(logits)
    p = as_tensor(targets)
    if p.shape != z.shape:
        raise ValueError(f"targets shape {p.shape} does not match logits shape {z.shape}")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("targets must lie in [0, 1]")
    B = z.shape[0]
    per = np.maximum(z, 0.0) - z * p + np.log1p(np.exp(-np.abs(z)))
    return float(per.sum()) / B, (sigmoid(z) - p) / B


def carving_loss(logits, pseudo) -> tuple[float, Tensor]:
    """Cross-entropy against pseudo-label probabilities; same form as :func:`sigmoid_ce`."""
    return sigmoid_ce(logits, pseudo)


def weak_targets(labels, num_classes: int, positive: float = POSITIVE,
                 negative: float = NEGATIVE) -> Tensor:
    """One ``positive`` entry at the observed class, ``negative`` elsewhere."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full((labels.shape[0], num_classes), float(negative))
    out[np.arange(labels.shape[0]), labels] = float(positive)
    return out


def binary_entropy(p) -> float:
    """``-sum[p ln p + (1-p) ln(1-p)]`` with ``0 ln 0 = 0``; the floor of :func:`sigmoid_ce`."""
    p = as_tensor(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(p > 0, p * np.log(p), 0.0)
        b = np.where(p < 1, (1 - p) * np.log1p(-p), 0.0)
    return -float((a + b).sum())
