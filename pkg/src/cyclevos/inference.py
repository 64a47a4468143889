"""Sequential mask propagation with reference-set strategies and test-time gradient correction."""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .data import VideoSequence
from .losses import LossConfig, seg_loss
from .segnet import SegNet, labels_from_scores
from .tensor import Tensor

log = logging.getLogger(__name__)

STRATEGIES = ("first", "prev", "first+prev", "mem")
DEGRADE_MODES = ("bounding-box", "baseline-predict")


@dataclass(frozen=True)
class Strategy:
    kind: str = "first+prev"
    mem_period: int = 5

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.kind!r}")
        if self.mem_period < 1:
            raise ValueError("mem_period must be >= 1")


@dataclass(frozen=True)
class CorrectionConfig:
    enabled: bool = False
    alpha: float = 1.0
    iters: int = 10
    period: int = 5
    clamp: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.iters < 0 or self.period < 1:
            raise ValueError("need alpha >= 0, iters >= 0, period >= 1")


def gradient_correct(
    net: SegNet,
    pred: np.ndarray,
    frame_t: np.ndarray,
    frame_1: np.ndarray,
    mask_1: np.ndarray,
    cfg: CorrectionConfig,
    loss_cfg: LossConfig = LossConfig(),
    query_1=None,
) -> tuple[np.ndarray, list[float]]:
    """Refine ``pred`` (O, H, W) by gradient descent on how well it reconstructs ``mask_1``.

    Each iteration segments frame 1 from the single reference (frame t, pred)
    and steps ``pred`` against the gradient of the frame-1 loss.  Weights are
    never touched.  Returns the refined mask and the loss trace (iterations
    0..N, the last entry being the loss of the returned mask).
    """
    if cfg.iters == 0 or cfg.alpha == 0:
        return pred, []
    q1 = query_1 if query_1 is not None else net.encode_query(frame_1)
    y = np.asarray(pred, dtype=T.default_dtype())
    trace: list[float] = []
    for _ in range(cfg.iters):
        m = Tensor(y, requires_grad=True)
        with T.Tape() as tape:
            loss = seg_loss(net.segment([(frame_t, m)], frame_1, query=q1), mask_1, loss_cfg)
        (g,) = tape.grad(loss, m)
        trace.append(loss.item())
        if not (np.all(np.isfinite(g)) and np.isfinite(trace[-1])):
            log.warning("gradient correction stopped early: non-finite gradient")
            return y, trace
        y = y - np.asarray(cfg.alpha, dtype=y.dtype) * g
        if cfg.clamp:
            y = np.clip(y, 0.0, 1.0)
    trace.append(seg_loss(net.segment([(frame_t, y)], frame_1, query=q1), mask_1, loss_cfg).item())
    return y, trace


def degrade_mask(mask: np.ndarray, mode: str, alternate: np.ndarray | None = None) -> np.ndarray:
    """Low-quality stand-in for a mask: per-object bounding boxes, or an alternate model's prediction."""
    if mode == "baseline-predict":
        if alternate is None:
            raise ValueError("baseline-predict needs the alternate model's prediction")
        return np.asarray(alternate)
    if mode != "bounding-box":
        raise ValueError(f"degrade mode must be one of {DEGRADE_MODES}, got {mode!r}")
    out = np.array(mask, dtype=np.float32, copy=True)
    for o in range(out.shape[0]):
        fg = out[o] > 0.5
        if not fg.any():
            continue
        rows = np.flatnonzero(fg.any(axis=1))
        cols = np.flatnonzero(fg.any(axis=0))
        out[o] = 0
        out[o, rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1] = 1
    return out


@dataclass
class Propagation:
    scores: np.ndarray  # (T, O, H, W); frame 0 is the given mask
    labels: np.ndarray  # (T, H, W) uint8
    memory_appends: list = field(default_factory=list)  # frame indices (0-based) appended to MEM
    memory_fingerprints: list = field(default_factory=list)  # per predicted frame
    corrected: list = field(default_factory=list)  # frame indices that were corrected
    traces: dict = field(default_factory=dict)  # frame index -> correction loss trace
    seconds: float = 0.0

    @property
    def fps(self) -> float:
        n = len(self.scores) - 1
        return n / self.seconds if self.seconds > 0 else float("inf")


def _fingerprint(refs) -> str:
    h = hashlib.sha256()
    for frame, mask in refs:
        h.update(np.ascontiguousarray(frame).tobytes())
        h.update(np.ascontiguousarray(mask).tobytes())
    return h.hexdigest()


# (frame index, reference list, target frame, predicted scores) -> mask kept as reference
Degrader = Callable[[int, list, np.ndarray, np.ndarray], np.ndarray]


def propagate(
    net: SegNet,
    video: VideoSequence,
    mask_1: np.ndarray | None,
    strategy: Strategy = Strategy(),
    correction: CorrectionConfig = CorrectionConfig(),
    degrade: Degrader | None = None,
    loss_cfg: LossConfig = LossConfig(),
) -> Propagation:
    """Segment frames 1..T-1 in order from the first-frame masks ``mask_1`` (O, H, W).

    The mask kept as a reference for later frames is the prediction, replaced
    by ``degrade(...)`` when given, and gradient-corrected on the correction
    schedule (first predicted frame, then every ``period`` frames).  Without
    degradation the corrected mask is also the output for that frame.
    """
    if mask_1 is None:
        raise ValueError(f"{video.name}: the first-frame mask is required")
    mask_1 = np.asarray(mask_1, dtype=np.float32)
    frames = video.frames
    n = len(frames)
    if n < 2:
        raise ValueError(f"{video.name}: need at least 2 frames")
    start = time.perf_counter()
    scores = np.empty((n,) + mask_1.shape, dtype=np.float32)
    scores[0] = mask_1
    first = (frames[0], mask_1)
    prev = first
    mem = [first]
    res = Propagation(scores, np.empty((n,) + mask_1.shape[1:], dtype=np.uint8))
    q1 = None
    for t in range(1, n):
        if strategy.kind == "first":
            refs = [first]
        elif strategy.kind == "prev":
            refs = [prev]
        elif strategy.kind == "first+prev":
            refs = [first, prev]
        else:
            refs = list(mem)
        res.memory_fingerprints.append(_fingerprint(refs))
        pred = net.segment(refs, frames[t]).data
        out = keep = pred
        if degrade is not None:
            keep = np.asarray(degrade(t, refs, frames[t], pred), dtype=np.float32)
        if correction.enabled and (t - 1) % correction.period == 0:
            if q1 is None:
                q1 = net.encode_query(frames[0])
            keep, trace = gradient_correct(net, keep, frames[t], frames[0], mask_1, correction, loss_cfg, q1)
            res.corrected.append(t)
            res.traces[t] = trace
            if degrade is None:
                out = keep
        scores[t] = out
        prev = (frames[t], keep)
        if strategy.kind == "mem" and (t - 1) % strategy.mem_period == 0:
            mem.append((frames[t], keep))
            res.memory_appends.append(t)
    res.seconds = time.perf_counter() - start
    for t in range(n):
        res.labels[t] = labels_from_scores(scores[t])
    return res


def bbox_degrader(video: VideoSequence) -> Degrader:
    """Replace kept references with bounding boxes of the ground-truth objects."""

    def fn(t, refs, frame, pred):
        return degrade_mask(video.planes(t), "bounding-box")

    return fn


def baseline_degrader(alt: SegNet) -> Degrader:
    """Replace kept references with another model's prediction from the same references."""

    def fn(t, refs, frame, pred):
        return degrade_mask(pred, "baseline-predict", alternate=alt.segment(refs, frame).data)

    return fn
