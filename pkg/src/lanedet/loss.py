"""Training objective: weighted per-pixel cross entropy over the 5-class
segmentation map plus 0.1-weighted binary cross entropy on the 4 lane
existence probabilities. Each part returns its exact gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ShapeMismatchError


@dataclass(frozen=True)
class LossConfig:
    exist_weight: float = 0.1
    background_class_weight: float = 0.4
    lane_class_weight: float = 1.0
    probability_clamp: float = 1e-7

    def __post_init__(self):
        if self.exist_weight <= 0:
            raise ValueError("exist_weight must be positive")
        if not 0.0 < self.probability_clamp < 0.5:
            raise ValueError("probability_clamp must be in (0, 0.5)")

    def class_weights(self, num_classes: int) -> np.ndarray:
        w = np.full(num_classes, self.lane_class_weight)
        w[0] = self.background_class_weight
        return w


@dataclass(frozen=True)
class LossValue:
    total: float
    ce_part: float
    exist_part: float


def bce_exist(exist_probs: np.ndarray, labels: np.ndarray,
              clamp: float = 1e-7) -> tuple[float, np.ndarray]:
    """Mean binary cross entropy over all N x 4 entries.

    Probabilities are clamped to [clamp, 1-clamp] before the logs so
    saturated predictions stay finite; the gradient is zero at clamped
    entries (the clamp kills the dependence).
    """
    if exist_probs.shape != labels.shape:
        raise ShapeMismatchError(f"probs {exist_probs.shape} vs labels {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("existence labels must be 0 or 1")
    y = labels.astype(np.float64)
    x = np.clip(exist_probs.astype(np.float64), clamp, 1.0 - clamp)
    n = x.size
    loss = float(-(y * np.log(x) + (1.0 - y) * np.log1p(-x)).sum() / n)
    grad = (x - y) / (x * (1.0 - x)) / n
    grad[(exist_probs < clamp) | (exist_probs > 1.0 - clamp)] = 0.0
    return loss, grad.astype(exist_probs.dtype)


def weighted_ce_seg(seg_logits: np.ndarray, label_mask: np.ndarray,
                    class_weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-pixel weighted cross entropy, normalized by the applied weights.

    The value is a weighted mean of -log softmax(logits)[label]; the gradient
    is (softmax - onehot) * weight[label] / sum(weights applied).
    """
    n, c, h, w = seg_logits.shape
    if label_mask.shape != (n, h, w):
        raise ShapeMismatchError(f"label mask {label_mask.shape} != {(n, h, w)}")
    if (class_weights <= 0).any():
        raise ValueError("class weights must be positive")
    ids = label_mask.astype(np.int64)
    if ids.min() < 0 or ids.max() >= c:
        raise ValueError(f"class id out of range 0..{c - 1}: {ids.min()}..{ids.max()}")
    probs = ops.channel_softmax(seg_logits.astype(np.float64))
    pix_w = class_weights[ids]
    norm = float(pix_w.sum())
    p_label = np.take_along_axis(probs, ids[:, None], axis=1)[:, 0]
    loss = float((pix_w * -np.log(np.maximum(p_label, 1e-300))).sum() / norm)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, ids[:, None], 1.0, axis=1)
    grad = (probs - onehot) * pix_w[:, None] / norm
    return loss, grad.astype(seg_logits.dtype)


def total_loss(seg_logits: np.ndarray, exist_probs: np.ndarray,
               label_mask: np.ndarray, exist_labels: np.ndarray,
               config: LossConfig = LossConfig()
               ) -> tuple[LossValue, np.ndarray, np.ndarray]:
    """Combined objective: ce + exist_weight * bce. Returns the loss parts and
    the gradients for both decoder branches."""
    ce, d_seg = weighted_ce_seg(seg_logits, label_mask,
                                config.class_weights(seg_logits.shape[1]))
    ex, d_exist = bce_exist(exist_probs, exist_labels, config.probability_clamp)
    value = LossValue(total=ce + config.exist_weight * ex, ce_part=ce, exist_part=ex)
    return value, d_seg, (config.exist_weight * d_exist).astype(exist_probs.dtype)
