"""Training objectives: binary cross-entropy for both tasks plus their blend.

Cross-entropy is computed in its negated (minimized) form
``-(y*log(p) + (1-y)*log(1-p))`` with every log argument floored at 1e-12,
which is equivalent to clamping probabilities into [1e-12, 1 - 1e-12] and
keeps all losses finite for predictions anywhere in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import ops
from .tensor import Tensor, as_tensor

STAGE_SEG_WEIGHTS = {1: 1.0, 2: 0.0, 3: 0.5}


@dataclass(frozen=True)
class LossConfig:
    """Blend weight and the (default-off) extras of the objective."""

    seg_weight: float = 0.5
    pixel_label_smoothing: float = 0.0
    positive_class_weight: Optional[float] = None

    def __post_init__(self):
        if not 0.0 <= self.seg_weight <= 1.0:
            raise ValueError(f"seg_weight must lie in [0, 1], got {self.seg_weight}")
        if not 0.0 <= self.pixel_label_smoothing < 1.0:
            raise ValueError(
                f"pixel_label_smoothing must lie in [0, 1), got {self.pixel_label_smoothing}"
            )


def _binary_cross_entropy_mean(targets: np.ndarray, probs: Tensor) -> Tensor:
    """Mean of -(t*log(p) + (1-t)*log(1-p)) over every element."""
    t = targets.astype(probs.dtype, copy=False)
    ll = ops.add(
        ops.mul(Tensor(t), ops.log(probs)),
        ops.mul(Tensor(1.0 - t), ops.log(1.0 - probs)),
    )
    return ops.mul(ops.reduce_mean(ll), -1.0)


def classification_loss(labels, probs, positive_class_weight: Optional[float] = None) -> Tensor:
    """Per-sample binary cross-entropy averaged over the batch.

    ``labels``: (m,) in {0, 1}; ``probs``: tensor of shape (m,).  The
    optional positive-class weight scales positive samples' terms while
    keeping the 1/m normalization.
    """
    probs = as_tensor(probs)
    y = np.asarray(labels)
    if y.shape != probs.shape:
        raise ValueError(
            f"labels shape {y.shape} does not match predictions shape {probs.shape}"
        )
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("classification labels must be 0 or 1")
    if positive_class_weight is None:
        return _binary_cross_entropy_mean(y, probs)
    w = np.where(y == 1, positive_class_weight, 1.0).astype(probs.dtype)
    t = y.astype(probs.dtype)
    ll = ops.add(
        ops.mul(Tensor(t * w), ops.log(probs)),
        ops.mul(Tensor((1.0 - t) * w), ops.log(1.0 - probs)),
    )
    return ops.mul(ops.reduce_mean(ll), -1.0)


def segmentation_loss(masks, probs, pixel_label_smoothing: float = 0.0) -> Tensor:
    """Pixelwise binary cross-entropy, normalized by batch * height * width."""
    probs = as_tensor(probs)
    m = np.asarray(masks)
    if m.shape != probs.shape:
        raise ValueError(
            f"masks shape {m.shape} does not match predictions shape {probs.shape}"
        )
    t = m.astype(np.float64)
    if pixel_label_smoothing:
        s = pixel_label_smoothing
        t = t * (1.0 - s) + s / 2.0
    return _binary_cross_entropy_mean(t, probs)


def combined_loss(cls_loss, seg_loss, seg_weight: float) -> Tensor:
    """Convex combination ``(1 - w) * cls + w * seg``.

    The endpoints return the corresponding term unchanged, so a pure
    single-task blend builds no graph edge into the other branch.
    """
    if not 0.0 <= seg_weight <= 1.0:
        raise ValueError(f"seg_weight must lie in [0, 1], got {seg_weight}")
    cls_loss = as_tensor(cls_loss)
    if seg_weight == 0.0:
        return cls_loss
    seg_loss = as_tensor(seg_loss)
    if seg_weight == 1.0:
        return seg_loss
    return ops.add(ops.mul(cls_loss, 1.0 - seg_weight), ops.mul(seg_loss, seg_weight))
