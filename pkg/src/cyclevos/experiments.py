"""Paired-seed ablation harness.

Trains a baseline arm (cycle term off) and a cyclic arm from the same seeds,
then scores: the component table (baseline / +cyclic / +GC / +both), the
reference-strategy table, degraded-reference robustness, correction cost
versus N, and cycle-ERF statistics.  Every table is a list of flat dicts so
it can be written as CSV or markdown without further massaging.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .data import SuiteConfig, VideoSequence, generate_suite
from .erf import compute_cycle_erf, in_out_means, partition_reference
from .inference import STRATEGIES, CorrectionConfig, Strategy, baseline_degrader, bbox_degrader, propagate
from .metrics import EvalReport, evaluate, jaccard
from .segnet import ModelConfig, SegNet, Weights, labels_from_scores, load_checkpoint
from .trainer import TrainConfig, run_training

log = logging.getLogger(__name__)

ARMS = ("baseline", "cyclic")
ALPHA_GRID = (0.01, 0.1, 0.5, 1.0, 2.0, 10.0, 100.0, 1000.0, 10000.0)
# desk-scale recipe: single-clip Adam steps at a larger rate than the library default
DESK_TRAIN = TrainConfig(epochs=200, batch_size=1, lr=3e-3)


@dataclass(frozen=True)
class BenchConfig:
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = DESK_TRAIN
    seeds: tuple = (0, 1, 2)
    strategy: str = "mem"  # pipeline used for the component and degradation tables
    mem_period: int = 5
    iters: int = 10
    period: int = 5
    alpha: float | None = None  # None: tune on the validation split
    alpha_grid: tuple = ALPHA_GRID
    erf_iters: int = 50
    erf_alpha: float = 1000.0
    erf_target: int = 0
    erf_reference: int = 8
    timing_iters: tuple = (2, 5, 10, 20)

    def correction(self, alpha: float, enabled: bool = True) -> CorrectionConfig:
        return CorrectionConfig(enabled=enabled, alpha=alpha, iters=self.iters, period=self.period)

    def pipeline(self, kind: str | None = None) -> Strategy:
        return Strategy(kind or self.strategy, self.mem_period)


def arm_train_config(base: TrainConfig, arm: str, seed: int) -> TrainConfig:
    if arm not in ARMS:
        raise ValueError(f"arm must be one of {ARMS}, got {arm!r}")
    return replace(base, seed=seed, cycle_weight=base.cycle_weight if arm == "cyclic" else 0.0)


def _config_record(cfg: BenchConfig, arm: str, seed: int) -> dict:
    return {
        "arm": arm,
        "seed": seed,
        "suite": asdict(cfg.suite),
        "model": asdict(cfg.model),
        "train": asdict(arm_train_config(cfg.train, arm, seed)),
    }


def train_arms(
    cfg: BenchConfig,
    suite: dict[str, list[VideoSequence]] | None = None,
    root=None,
    progress: Callable[[str], None] | None = None,
) -> dict[tuple[str, int], Weights]:
    """Train (or reload) one checkpoint per (arm, seed).

    With ``root`` set, each run lives in ``root/<arm>-<seed>/``; a run whose
    ``run.json`` matches the requested config is reloaded instead of retrained.
    """
    suite = suite or generate_suite(cfg.suite)
    out: dict[tuple[str, int], Weights] = {}
    for seed in cfg.seeds:
        for arm in ARMS:
            record = _config_record(cfg, arm, seed)
            run_dir = Path(root) / f"{arm}-{seed}" if root is not None else None
            if run_dir is not None and (run_dir / "model.cvos").exists() and (run_dir / "run.json").exists():
                if json.loads((run_dir / "run.json").read_text()) == json.loads(json.dumps(record)):
                    out[(arm, seed)] = load_checkpoint(run_dir / "model.cvos")[1]
                    continue
            start = time.perf_counter()
            res = run_training(suite["train"], arm_train_config(cfg.train, arm, seed), cfg.model, out_dir=run_dir)
            seconds = time.perf_counter() - start
            if run_dir is not None:
                (run_dir / "run.json").write_text(json.dumps(record, indent=2))
                (run_dir / "seconds.txt").write_text(f"{seconds:.3f}\n")
            if progress is not None:
                progress(f"trained {arm}-{seed} in {seconds:.0f}s")
            out[(arm, seed)] = res.weights
    return out


def training_seconds(root) -> float:
    """Total wall time recorded by ``train_arms`` under ``root``."""
    return sum(float(p.read_text()) for p in Path(root).glob("*/seconds.txt"))


def score(
    net: SegNet,
    seqs: list[VideoSequence],
    strategy: Strategy,
    correction: CorrectionConfig = CorrectionConfig(),
    degrade: str | None = None,
    alt: SegNet | None = None,
) -> tuple[EvalReport, dict]:
    """Propagate every sequence from its first mask and evaluate; also returns the raw propagations."""
    props = {}
    for seq in seqs:
        if degrade == "bounding-box":
            deg = bbox_degrader(seq)
        elif degrade == "baseline-predict":
            deg = baseline_degrader(alt)
        else:
            deg = None
        props[seq.name] = propagate(net, seq, seq.planes(0), strategy, correction, deg)
    seconds = sum(p.seconds for p in props.values())
    frames = sum(len(p.scores) - 1 for p in props.values())
    report = evaluate({k: p.labels for k, p in props.items()}, seqs, fps=frames / seconds if seconds else None)
    return report, props


def _nets(cfg: BenchConfig, models, arm: str) -> list[tuple[int, SegNet]]:
    return [(s, SegNet(cfg.model, models[(arm, s)])) for s in cfg.seeds]


def tune_alpha(cfg: BenchConfig, models, val: list[VideoSequence], arm: str = "cyclic") -> tuple[float, list[dict]]:
    """Pick the correction rate with the best mean validation J&F; ties go to the smaller rate."""
    rows = []
    nets = _nets(cfg, models, arm)
    plain = np.mean([score(net, val, cfg.pipeline())[0].JF for _, net in nets])
    rows.append({"alpha": 0.0, "JF": float(plain)})
    for a in cfg.alpha_grid:
        jf = np.mean([score(net, val, cfg.pipeline(), cfg.correction(a))[0].JF for _, net in nets])
        rows.append({"alpha": a, "JF": float(jf)})
    best = max(rows[1:], key=lambda r: (r["JF"], -r["alpha"]))
    return best["alpha"], rows


def component_table(cfg: BenchConfig, models, seqs, alpha: float) -> list[dict]:
    """Rows per (variant, seed): baseline, +cyclic, +GC (baseline weights), +both."""
    variants = (("baseline", "baseline", False), ("+cyclic", "cyclic", False), ("+GC", "baseline", True), ("+both", "cyclic", True))
    rows = []
    for name, arm, gc in variants:
        for seed, net in _nets(cfg, models, arm):
            rep, props = score(net, seqs, cfg.pipeline(), cfg.correction(alpha, enabled=gc))
            rows.append({"variant": name, "seed": seed, "J": rep.J, "F": rep.F, "JF": rep.JF, "fps": rep.fps})
    return rows


def strategy_table(cfg: BenchConfig, models, seqs) -> list[dict]:
    """J&F of each reference strategy for both arms, per seed."""
    rows = []
    for kind in STRATEGIES:
        for seed in cfg.seeds:
            jf = {arm: score(SegNet(cfg.model, models[(arm, seed)]), seqs, cfg.pipeline(kind))[0].JF for arm in ARMS}
            rows.append({"strategy": kind, "seed": seed, "baseline": jf["baseline"], "cyclic": jf["cyclic"],
                         "delta": jf["cyclic"] - jf["baseline"]})
    return rows


def degradation_table(cfg: BenchConfig, models, seqs, alpha: float, arm: str = "cyclic") -> list[dict]:
    """MEM with clean, bounding-box and baseline-predicted appended references, with and without correction."""
    rows = []
    for seed, net in _nets(cfg, models, arm):
        alt = SegNet(cfg.model, models[("baseline", seed)])
        for degrade in (None, "bounding-box", "baseline-predict"):
            for gc in (False, True):
                rep, _ = score(net, seqs, cfg.pipeline("mem"), cfg.correction(alpha, enabled=gc), degrade, alt)
                rows.append({"reference": degrade or "clean", "GC": gc, "seed": seed, "J": rep.J, "F": rep.F, "JF": rep.JF})
    return rows


def correction_trend(props: dict) -> tuple[int, int]:
    """(frames whose final reconstruction loss is <= the initial one, corrected frames)."""
    ok = total = 0
    for p in props.values():
        for trace in p.traces.values():
            if trace:
                total += 1
                ok += trace[-1] <= trace[0]
    return ok, total


def timing_table(cfg: BenchConfig, net: SegNet, seqs, alpha: float, repeats: int = 2) -> dict:
    """Per-frame seconds without correction and with N iterations; least-squares line of overhead vs N."""

    def per_frame(correction):
        best = np.inf
        for _ in range(repeats):
            _, props = score(net, seqs, cfg.pipeline(), correction)
            frames = sum(len(p.scores) - 1 for p in props.values())
            best = min(best, sum(p.seconds for p in props.values()) / frames)
        return best

    base = per_frame(cfg.correction(alpha, enabled=False))
    rows = []
    for n in cfg.timing_iters:
        t = per_frame(replace(cfg.correction(alpha), iters=n))
        rows.append({"N": n, "sec_per_frame": t, "overhead": t - base, "fps": 1.0 / t})
    ns = np.array([r["N"] for r in rows], dtype=float)
    ov = np.array([r["overhead"] for r in rows])
    slope, intercept = np.polyfit(ns, ov, 1)
    fit = slope * ns + intercept
    ss_res, ss_tot = float(np.sum((ov - fit) ** 2)), float(np.sum((ov - ov.mean()) ** 2))
    return {
        "uncorrected_sec_per_frame": base,
        "uncorrected_fps": 1.0 / base,
        "rows": rows,
        "slope": float(slope),
        "intercept": float(intercept),
        "r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0,
    }


def erf_probe(net: SegNet, seq: VideoSequence, iters: int, alpha: float, target: int = 0, reference: int = 8):
    """Cycle-ERF of frame ``reference`` for reconstructing frame ``target``, plus per-object statistics.

    Returns ``(heat (O, H, W), rows)``; each row holds the in/out-of-object heat
    means on the reference frame and the J of reconstructing the target frame
    from the heat inside (``J_in``) or outside (``J_ex``) the objects.
    """
    l = min(reference, len(seq) - 1)
    heat = compute_cycle_erf(net, seq.frames[l], seq.frames[target], seq.planes(target), iters, alpha)
    mask_l = seq.planes(l)
    recon = {}
    for mode in ("in", "ex"):
        ref = partition_reference(heat, mask_l, mode)
        recon[mode] = labels_from_scores(net.segment([(seq.frames[l], ref)], seq.frames[target]).data)
    rows = []
    for o in range(seq.n_objects):
        hin, hout = in_out_means(heat[o], mask_l[o])
        rows.append({
            "sequence": seq.name,
            "object": o + 1,
            "heat_in": hin,
            "heat_out": hout,
            "J_in": jaccard(recon["in"], seq.masks[target], o + 1),
            "J_ex": jaccard(recon["ex"], seq.masks[target], o + 1),
        })
    return heat, rows


def erf_table(cfg: BenchConfig, net: SegNet, seqs, alpha: float | None = None) -> list[dict]:
    """``erf_probe`` rows over all sequences."""
    rows = []
    for seq in seqs:
        rows += erf_probe(net, seq, cfg.erf_iters, cfg.erf_alpha if alpha is None else alpha, cfg.erf_target, cfg.erf_reference)[1]
    return rows


def summarize(rows: list[dict], key: str, value: str = "JF") -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r[value])
    return {k: float(np.mean(v)) for k, v in groups.items()}
