"""Training losses: image-level class BCE, pixel-level saliency BCE, and
pixel-level cross-entropy against hard pseudo labels.

All logs are clamped at 1e-12, so every loss is finite for probabilities at
the boundary of [0,1]. Pixel-level losses support two reductions over the
spatial sum: "sum" keeps the per-image pixel sum (loss scales with image
area), "mean" divides by the pixel count so the magnitude is comparable to
the class loss at any resolution. Both then average over the batch.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

IGNORE_LABEL = 255


def _bce_sum(pred: Tensor, target: np.ndarray) -> Tensor:
    """Sum over all elements of -[t*log(p) + (1-t)*log(1-p)]."""
    t = Tensor(target)
    pos = T.mul(t, T.log(pred))
    neg = T.mul(1.0 - t, T.log(1.0 - pred))
    return -(pos + neg).sum()


def class_loss(class_probs: Tensor, labels: np.ndarray, presence_cap: float | None = None) -> Tensor:
    """Multi-label BCE between predicted class presence and one-hot labels.

    class_probs: [B,C] in [0,1]; labels: [B,C] with entries in {0,1} and at
    least one positive per row. Mean over the batch of the per-image sum over
    classes.

    presence_cap rescales the positive term so that a mean activation of
    `cap` already counts as full presence (objects cover only part of an
    image; without the cap the positive term rewards claiming background
    pixels too). Used by backbone pretraining; the two-stage training
    objectives keep the plain BCE (cap disabled).
    """
    labels = np.asarray(labels, dtype=np.float64)
    if class_probs.data.shape != labels.shape:
        raise ShapeError(f"class_probs {class_probs.data.shape} vs labels {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("category labels must be one-hot (entries 0 or 1)")
    if not np.all(labels.sum(axis=1) >= 1):
        raise ValueError("every category label needs at least one present class")
    batch = labels.shape[0]
    if presence_cap is None:
        return _bce_sum(class_probs, labels) / batch
    if not 0 < presence_cap <= 1:
        raise ValueError(f"presence_cap must be in (0,1], got {presence_cap}")
    t = Tensor(labels)
    capped = 1.0 - T.relu(1.0 - class_probs * (1.0 / presence_cap))
    pos = T.mul(t, T.log(capped))
    neg = T.mul(1.0 - t, T.log(1.0 - class_probs))
    return -(pos + neg).sum() / batch


def presence_loss(scores: Tensor, labels: np.ndarray) -> Tensor:
    """BCE between per-class saliency scores and the image's one-hot category
    vector. A pretraining aid only: gives the score head a semantically
    meaningful starting point, standing in for what a pretrained backbone
    would provide."""
    labels = np.asarray(labels, dtype=np.float64)
    if scores.data.shape != labels.shape:
        raise ShapeError(f"scores {scores.data.shape} vs labels {labels.shape}")
    return _bce_sum(scores, labels) / labels.shape[0]


def saliency_loss(saliency: Tensor, targets: np.ndarray, pixel_reduction: str = "mean") -> Tensor:
    """Per-pixel BCE between a saliency map and binary ground truth.

    saliency: [B,1,H,W] in [0,1]; targets: [B,H,W] in {0,1}.
    """
    targets = np.asarray(targets, dtype=np.float64)
    b = saliency.data.shape[0]
    if saliency.data.ndim != 4 or saliency.data.shape[1] != 1:
        raise ShapeError(f"saliency map must be [B,1,H,W], got {saliency.data.shape}")
    if targets.shape != (b,) + saliency.data.shape[2:]:
        raise ShapeError(f"saliency {saliency.data.shape} vs targets {targets.shape}")
    if not np.all((targets == 0) | (targets == 1)):
        raise ValueError("saliency targets must be binary")
    total = _bce_sum(saliency, targets.reshape(saliency.data.shape))
    if pixel_reduction == "mean":
        return total / targets.size
    if pixel_reduction == "sum":
        return total / b
    raise ValueError(f"unknown pixel_reduction {pixel_reduction!r}")


def pseudo_seg_loss(seg: Tensor, pseudo: np.ndarray, pixel_reduction: str = "mean") -> Tensor:
    """Cross-entropy of the predicted distribution at each hard pseudo label.

    seg: [B,C+1,H,W] per-pixel distribution; pseudo: [B,H,W] integer labels in
    {0..C} (C = background) or IGNORE_LABEL, which contributes nothing.
    """
    pseudo = np.asarray(pseudo)
    if seg.data.ndim != 4:
        raise ShapeError(f"seg must be [B,K,H,W], got {seg.data.shape}")
    b, k = seg.data.shape[0], seg.data.shape[1]
    if pseudo.shape != (b,) + seg.data.shape[2:]:
        raise ShapeError(f"seg {seg.data.shape} vs pseudo labels {pseudo.shape}")
    valid = pseudo != IGNORE_LABEL
    if valid.any() and (pseudo[valid].min() < 0 or pseudo[valid].max() >= k):
        bad = sorted(set(pseudo[valid][(pseudo[valid] < 0) | (pseudo[valid] >= k)].tolist()))
        raise ValueError(f"pseudo labels outside 0..{k - 1} + ignore: {bad}")

    onehot = np.zeros(seg.data.shape)
    bb, yy, xx = np.nonzero(valid)
    onehot[bb, pseudo[bb, yy, xx], yy, xx] = 1.0
    total = -T.mul(Tensor(onehot), T.log(seg)).sum()
    if pixel_reduction == "mean":
        return total / (pseudo.size / b) / b
    if pixel_reduction == "sum":
        return total / b
    raise ValueError(f"unknown pixel_reduction {pixel_reduction!r}")


def stage1_loss(class_probs: Tensor, labels: np.ndarray, saliency: Tensor, targets: np.ndarray,
                pixel_reduction: str = "mean", class_weight: float = 1.0,
                saliency_weight: float = 1.0) -> Tensor:
    """Stage-1 objective: class BCE on the category batch plus saliency BCE on
    the saliency batch (unit weights by default)."""
    return (class_weight * class_loss(class_probs, labels)
            + saliency_weight * saliency_loss(saliency, targets, pixel_reduction))


def stage2_loss(saliency: Tensor, targets: np.ndarray, seg: Tensor, pseudo: np.ndarray,
                pixel_reduction: str = "mean", saliency_weight: float = 1.0,
                pseudo_weight: float = 1.0) -> Tensor:
    """Stage-2 objective: saliency BCE plus pseudo-label cross-entropy."""
    return (saliency_weight * saliency_loss(saliency, targets, pixel_reduction)
            + pseudo_weight * pseudo_seg_loss(seg, pseudo, pixel_reduction))
