"""Cyclic training: forward propagation over a 3-frame clip, backward reconstruction of frame 1, Adam."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import VideoSequence
from .losses import LossConfig, seg_loss
from .segnet import ModelConfig, SegNet, Weights, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)

CYCLE_MODES = ("simple", "full-history")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    batch_size: int = 2
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gamma: float = 1.0
    seed: int = 0
    curriculum_base: int = 5
    curriculum_step: int = 5
    curriculum_period: int = 20
    cycle_mode: str = "simple"
    detach_cycle: bool = False
    cycle_weight: float = 1.0
    augment: bool = True  # random channel permutation + flips per clip

    def __post_init__(self):
        if self.cycle_mode not in CYCLE_MODES:
            raise ValueError(f"cycle_mode must be one of {CYCLE_MODES}, got {self.cycle_mode!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.curriculum_period < 1:
            raise ValueError("epochs, batch_size and curriculum_period must be positive")
        if self.lr < 0 or self.cycle_weight < 0 or self.gamma < 0:
            raise ValueError("lr, cycle_weight and gamma must be non-negative")
        if self.curriculum_base < 2 or self.curriculum_step < 0:
            raise ValueError("curriculum_base must be >= 2 (three distinct frames) and step >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")

    @property
    def loss(self) -> LossConfig:
        return LossConfig(gamma=self.gamma)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_weights(cls, weights: Weights) -> "OptimizerState":
        return cls({k: np.zeros_like(t.data) for k, t in weights.items()}, {k: np.zeros_like(t.data) for k, t in weights.items()})


def adam_update(weights: Weights, grads: dict, opt: OptimizerState, cfg: TrainConfig) -> Weights:
    opt.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1**opt.step, 1 - b2**opt.step
    out = Weights()
    for k, t in weights.items():
        g = grads[k]
        opt.m[k] = b1 * opt.m[k] + (1 - b1) * g
        opt.v[k] = b2 * opt.v[k] + (1 - b2) * g * g
        step = (cfg.lr / c1) * opt.m[k] / (np.sqrt(opt.v[k] / c2) + cfg.adam_eps)
        out[k] = Tensor._wrap((t.data - step).astype(t.data.dtype, copy=False))
    return out


def max_interval(epoch: int, cfg: TrainConfig) -> int:
    """Largest allowed frame gap; grows by ``curriculum_step`` every ``curriculum_period`` epochs."""
    return cfg.curriculum_base + cfg.curriculum_step * (epoch // cfg.curriculum_period)


@dataclass
class Clip:
    name: str
    indices: tuple
    frames: list  # 3 x (3, H, W)
    masks: list  # 3 x (O, H, W) float planes


def sample_clip(video: VideoSequence, epoch: int, rng: np.random.Generator, cfg: TrainConfig) -> Clip | None:
    """Three sorted, distinct frame indices whose pairwise gaps stay within the curriculum interval."""
    n = len(video)
    if n < 3 or not video.fully_annotated:
        log.warning("skipping %s: need >= 3 annotated frames", video.name)
        return None
    mi = max_interval(epoch, cfg)
    a = int(rng.integers(0, n - 2))
    c = int(rng.integers(a + 2, min(a + mi, n - 1) + 1))
    b = int(rng.integers(a + 1, c))
    idx = (a, b, c)
    frames, masks = [video.frames[i] for i in idx], [video.planes(i) for i in idx]
    if cfg.augment:
        frames, masks = _augment(frames, masks, rng)
    return Clip(video.name, idx, frames, masks)


def _augment(frames, masks, rng: np.random.Generator):
    """Same random colour-channel permutation and flips for every frame of a clip.

    Keeps a small suite from being memorized by colour or position, so the
    network has to read the target identity out of its reference memory.
    """
    perm = rng.permutation(3)
    flip_y, flip_x = rng.integers(2, size=2)
    transpose = frames[0].shape[1] == frames[0].shape[2] and rng.integers(2) == 1

    def spatial(a):
        if flip_y:
            a = a[:, ::-1]
        if flip_x:
            a = a[:, :, ::-1]
        if transpose:
            a = a.transpose(0, 2, 1)
        return np.ascontiguousarray(a)

    return [spatial(f[perm]) for f in frames], [spatial(m) for m in masks]


@dataclass
class StepLosses:
    forward: float
    cycle: float
    total: float


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


def clip_losses(net: SegNet, clip: Clip, cfg: TrainConfig) -> tuple[Tensor, Tensor | None]:
    """Forward loss on frame t and (optionally) the cyclic reconstruction loss on frame 1."""
    (x1, xa, xt), (y1, _, yt) = clip.frames, clip.masks
    lcfg = cfg.loss
    pred_a = net.segment([(x1, y1)], xa)
    pred_t = net.segment([(x1, y1), (xa, pred_a)], xt)
    fwd = seg_loss(pred_t, yt, lcfg)
    if cfg.cycle_weight == 0:
        return fwd, None
    ref_t = pred_t.detach() if cfg.detach_cycle else pred_t
    if cfg.cycle_mode == "simple":
        cyc_refs = [(xt, ref_t)]
    else:
        ref_a = pred_a.detach() if cfg.detach_cycle else pred_a
        cyc_refs = [(xa, ref_a), (xt, ref_t)]
    pred_1 = net.segment(cyc_refs, x1)
    return fwd, seg_loss(pred_1, y1, lcfg)


def train_step(
    mcfg: ModelConfig, weights: Weights, opt: OptimizerState, clips: Sequence[Clip], cfg: TrainConfig
) -> tuple[Weights, StepLosses, dict]:
    """One Adam update on a batch of clips; returns new weights, losses and per-parameter gradients."""
    tw = weights.trainable()
    net = SegNet(mcfg, tw)
    with T.Tape() as tape:
        fwd_terms, cyc_terms = [], []
        for clip in clips:
            f, c = clip_losses(net, clip, cfg)
            fwd_terms.append(f)
            if c is not None:
                cyc_terms.append(c)
        total = fwd_terms[0]
        for f in fwd_terms[1:]:
            total = T.add(total, f)
        for c in cyc_terms:
            total = T.add(total, T.mul_scalar(c, cfg.cycle_weight))
        total = T.mul_scalar(total, 1.0 / len(clips))
    losses = StepLosses(
        forward=float(np.mean([f.item() for f in fwd_terms])),
        cycle=float(np.mean([c.item() for c in cyc_terms])) if cyc_terms else 0.0,
        total=total.item(),
    )
    if not math.isfinite(losses.total):
        raise TrainingDiverged(
            f"non-finite loss at step {opt.step + 1}",
            {
                "step": opt.step + 1,
                "losses": asdict(losses),
                "clips": [(c.name, c.indices) for c in clips],
                "weight_norms": {k: float(np.linalg.norm(t.data)) for k, t in weights.items()},
            },
        )
    gmap = tape.backward(total)
    grads = {k: gmap[t.node].data if t.node in gmap else np.zeros_like(t.data) for k, t in tw.items()}
    return adam_update(weights, grads, opt, cfg), losses, grads


@dataclass
class TrainResult:
    weights: Weights
    log: list = field(default_factory=list)  # rows: epoch, step, forward, cycle, total
    grad_norm_max: dict = field(default_factory=dict)


LOSS_COLUMNS = ("epoch", "step", "forward_loss", "cycle_loss", "total")


def run_training(
    dataset: Sequence[VideoSequence],
    cfg: TrainConfig,
    mcfg: ModelConfig,
    out_dir=None,
    init: Weights | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train from seeded init (or ``init``); writes ``model.cvos`` and ``losses.csv`` when ``out_dir`` is set."""
    if not dataset:
        raise ValueError("run_training: empty dataset")
    rng = np.random.default_rng(cfg.seed)
    weights = init if init is not None else Weights.init(mcfg, cfg.seed)
    opt = OptimizerState.for_weights(weights)
    result = TrainResult(weights)
    step = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        clips = [c for c in (sample_clip(dataset[i], epoch, rng, cfg) for i in order) if c is not None]
        epoch_losses = []
        for b in range(0, len(clips), cfg.batch_size):
            try:
                weights, losses, grads = train_step(mcfg, weights, opt, clips[b : b + cfg.batch_size], cfg)
            except TrainingDiverged as err:
                if out is not None:
                    (out / "diagnostics.json").write_text(json.dumps(err.diagnostics, indent=2))
                raise
            step += 1
            for k, g in grads.items():
                result.grad_norm_max[k] = max(result.grad_norm_max.get(k, 0.0), float(np.linalg.norm(g)))
            result.log.append((epoch, step, losses.forward, losses.cycle, losses.total))
            epoch_losses.append(losses.total)
        if progress is not None and epoch_losses:
            progress(epoch, float(np.mean(epoch_losses)))
    result.weights = weights
    if out is not None:
        save_checkpoint(out / "model.cvos", mcfg, weights)
        write_loss_csv(out / "losses.csv", result.log)
    return result


def write_loss_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1], repr(r[2]), repr(r[3]), repr(r[4])])
