"""Class-weighted multi-class focal loss and cross-entropy on softmax outputs.

The loss is the mean, over non-ignored pixels of the whole batch, of
``w[c] * (1 - p)**gamma * -log(p)`` where ``c`` is the pixel's true class and
``p`` its predicted probability. ``gamma = 0`` gives weighted cross-entropy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import softmax_over_channels

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class FocalLossConfig:
    gamma: float = 2.0
    class_weights: Optional[Sequence[float]] = None
    ignore_index: Optional[int] = None

    def __post_init__(self):
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if self.class_weights is not None:
            w = tuple(float(v) for v in self.class_weights)
            if min(w) <= 0:
                raise ValueError("class weights must be strictly positive")
            object.__setattr__(self, "class_weights", w)

    @classmethod
    def mav_preset(cls, ignore_index=None) -> "FocalLossConfig":
        """gamma=2 with background weight 1 and target weight 20."""
        return cls(2.0, (1.0, 20.0), ignore_index)

    def weights_for(self, num_classes: int) -> np.ndarray:
        if self.class_weights is None:
            return np.ones(num_classes)
        if len(self.class_weights) != num_classes:
            raise ValueError(f"{len(self.class_weights)} class weights for {num_classes} classes")
        return np.asarray(self.class_weights, dtype=np.float64)


def _validate_labels(labels: np.ndarray, num_classes: int, ignore_index):
    labels = np.asarray(labels)
    valid = np.ones(labels.shape, dtype=bool) if ignore_index is None else labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"label {labels[where]} at {where} is outside [0, {num_classes})")
    return labels, valid


def pixel_focal(p_true, gamma: float, weight=1.0):
    """Per-pixel focal term for the probability of the true class."""
    p = np.clip(p_true, PROB_CLAMP, 1 - PROB_CLAMP)
    return -weight * (1 - p) ** gamma * np.log(p)


def focal_loss(probs: np.ndarray, labels: np.ndarray, cfg: FocalLossConfig = FocalLossConfig()):
    """Return ``(loss, grad)`` with ``grad`` taken w.r.t. the logits behind ``probs``.

    ``probs`` has shape (n, C, h, w) and sums to one over C; ``labels`` has
    shape (n, h, w).
    """
    probs = np.asarray(probs, dtype=np.float64)
    n, num_classes, h, w = probs.shape
    labels, valid = _validate_labels(labels, num_classes, cfg.ignore_index)
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match probs {probs.shape}")
    count = int(valid.sum())
    if count == 0:
        log.warning("every pixel is ignored; loss defined as 0")
        return 0.0, np.zeros_like(probs)
    weights = cfg.weights_for(num_classes)
    safe = np.where(valid, labels, 0)
    p_t = np.take_along_axis(probs, safe[:, None], axis=1)[:, 0]
    p = np.clip(p_t, PROB_CLAMP, 1 - PROB_CLAMP)
    w_t = weights[safe] * valid
    gamma = cfg.gamma
    logp = np.log(p)
    loss = float(np.sum(-w_t * (1 - p) ** gamma * logp) / count)

    dl_dp = -w_t * (1 - p) ** gamma / p
    if gamma != 0:
        dl_dp += w_t * gamma * (1 - p) ** (gamma - 1) * logp
    dl_dp *= (p_t > PROB_CLAMP) & (p_t < 1 - PROB_CLAMP)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
    # d p_t / d z_j = p_t * (onehot_j - p_j)
    grad = (dl_dp * p_t / count)[:, None] * (onehot - probs)
    return loss, grad


def cross_entropy(probs, labels, class_weights=None, ignore_index=None):
    return focal_loss(probs, labels, FocalLossConfig(0.0, class_weights, ignore_index))


def focal_loss_from_logits(logits, labels, cfg: FocalLossConfig = FocalLossConfig()):
    return focal_loss(softmax_over_channels(np.asarray(logits, dtype=np.float64)), labels, cfg)
