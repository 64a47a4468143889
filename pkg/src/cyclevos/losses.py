"""Mask losses: cross-entropy plus soft IoU, and the forward/backward cycle sum."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 1.0
    eps_clamp: float = 1e-6
    eps_iou: float = 1e-6

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.eps_clamp <= 0 or self.eps_iou <= 0:
            raise ValueError("epsilons must be positive")


def _check(op: str, pred: Tensor, gt: Tensor) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"{op}: shape mismatch {pred.shape} vs {gt.shape}")


def soft_iou(pred, gt, eps_iou: float = 1e-6) -> Tensor:
    """``(sum min(pred, gt) + eps) / (sum max(pred, gt) + eps)``; two empty masks give 1."""
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    _check("soft_iou", pred, gt)
    inter = T.add_scalar(T.sum_all(T.minimum(pred, gt)), eps_iou)
    union = T.add_scalar(T.sum_all(T.maximum(pred, gt)), eps_iou)
    return T.div(inter, union)


def seg_loss(pred, gt, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean binary cross-entropy minus ``gamma`` times soft IoU.

    ``pred``/``gt`` are a single plane ``(H, W)`` or a stack ``(O, H, W)``; a
    stack gives the mean of the per-object losses.  Predictions are clamped to
    ``[eps, 1 - eps]`` for the logarithms only.
    """
    pred, gt = T.as_tensor(pred), T.as_tensor(gt)
    _check("seg_loss", pred, gt)
    if pred.data.ndim == 3:
        n = pred.shape[0]
        total = seg_loss(T.index(pred, 0), T.index(gt, 0), cfg)
        for i in range(1, n):
            total = T.add(total, seg_loss(T.index(pred, i), T.index(gt, i), cfg))
        return T.mul_scalar(total, 1.0 / n) if n > 1 else total
    p = T.clip(pred, cfg.eps_clamp, 1.0 - cfg.eps_clamp)
    ce = T.add(T.mul(1.0 - gt, T.log(1.0 - p)), T.mul(gt, T.log(p)))
    loss = T.mul_scalar(T.mean_all(ce), -1.0)
    if cfg.gamma:
        loss = T.sub(loss, T.mul_scalar(soft_iou(pred, gt, cfg.eps_iou), cfg.gamma))
    return loss


def cycle_loss(pred_t, gt_t, pred_1, gt_1, cfg: LossConfig = LossConfig()) -> Tensor:
    """Loss on the forward target frame plus loss on the reconstructed first frame."""
    return T.add(seg_loss(pred_t, gt_t, cfg), seg_loss(pred_1, gt_1, cfg))
