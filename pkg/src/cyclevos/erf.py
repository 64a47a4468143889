"""Cycle effective receptive field.

Starting from an empty reference mask on frame ``l``, gradient steps push the
mask towards whatever best reconstructs the target mask on frame ``t``; the
positive part of the result shows which reference pixels the network relies on.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import soft_mask_to_pgm, write_float_sidecar
from .losses import LossConfig, seg_loss
from .segnet import SegNet
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ErfConfig:
    iters: int = 50
    alpha: float = 1.0
    target_frame: int = 0
    reference_frame: int = 8

    def __post_init__(self):
        if self.iters < 0 or self.alpha < 0:
            raise ValueError("ErfConfig: iters and alpha must be >= 0")


def compute_cycle_erf(
    net: SegNet,
    frame_l: np.ndarray,
    frame_t: np.ndarray,
    mask_t: np.ndarray,
    iters: int = 50,
    alpha: float = 1.0,
    loss_cfg: LossConfig = LossConfig(),
) -> np.ndarray:
    """``relu`` of the reference mask after ``iters`` unclamped descent steps from zeros; ``(O, H, W)``."""
    mask_t = np.asarray(mask_t, dtype=T.default_dtype())
    y = np.zeros_like(mask_t)
    q = net.encode_query(frame_t) if iters else None
    step = np.asarray(alpha, dtype=y.dtype)
    for i in range(iters):
        m = Tensor(y, requires_grad=True)
        with T.Tape() as tape:
            loss = seg_loss(net.segment([(frame_l, m)], frame_t, query=q), mask_t, loss_cfg)
        (g,) = tape.grad(loss, m)
        nxt = y - step * g
        if not np.all(np.isfinite(nxt)):
            log.warning("cycle-ERF stopped at iteration %d: non-finite update", i)
            break
        y = nxt
    return np.maximum(y, 0)


def partitioned_reconstruct(
    net: SegNet, frame_l: np.ndarray, erf: np.ndarray, mask_l: np.ndarray, mode: str, frame_1: np.ndarray
) -> np.ndarray:
    """Segment ``frame_1`` using only the ERF inside (``in``) or outside (``ex``) the objects on frame ``l``."""
    erf, mask_l = np.asarray(erf, dtype=np.float32), np.asarray(mask_l, dtype=np.float32)
    if erf.shape != mask_l.shape:
        raise ShapeError(f"partitioned_reconstruct: shape mismatch {erf.shape} vs {mask_l.shape}")
    ref = partition_reference(erf, mask_l, mode)
    return net.segment([(frame_l, ref)], frame_1).data


def partition_reference(erf: np.ndarray, mask_l: np.ndarray, mode: str) -> np.ndarray:
    if mode == "in":
        return erf * mask_l
    if mode == "ex":
        return erf * (1.0 - mask_l)
    raise ValueError(f"mode must be 'in' or 'ex', got {mode!r}")


def export_heatmap(path_stem, heat: np.ndarray) -> tuple[Path, Path]:
    """Max-normalized 8-bit PGM plus raw float32 sidecar for one ``(H, W)`` heatmap."""
    stem = Path(path_stem)
    peak = float(heat.max(initial=0.0))
    norm = heat / peak if peak > 0 else np.zeros_like(heat)
    pgm, raw = stem.with_suffix(".pgm"), stem.with_suffix(".f32")
    soft_mask_to_pgm(pgm, norm)
    write_float_sidecar(raw, heat)
    return pgm, raw


def in_out_means(heat: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Mean heat inside and outside a binary object plane."""
    inside = mask > 0.5
    hin = float(heat[inside].mean()) if inside.any() else 0.0
    hout = float(heat[~inside].mean()) if (~inside).any() else 0.0
    return hin, hout
