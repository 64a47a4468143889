"""Command-line entry point: synth | train | infer | eval | erf | ablate.

Configuration is a flat ``key = value`` file (or a previous ``run.json``)
overridden by flags; every key in :data:`SCHEMA` has a matching
``--dashed-name`` flag.  Each run writes ``run.json`` with the fully resolved
configuration so ``--config run.json`` repeats it exactly.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .data import (
    SuiteConfig,
    SynthSpec,
    generate_suite,
    load_suite,
    read_label_map,
    save_suite,
    soft_mask_to_pgm,
    suite_checksum,
    write_label_map,
)
from .erf import export_heatmap
from .experiments import (
    ALPHA_GRID,
    DESK_TRAIN,
    BenchConfig,
    component_table,
    correction_trend,
    degradation_table,
    erf_probe,
    erf_table,
    score,
    strategy_table,
    timing_table,
    train_arms,
    tune_alpha,
)
from .inference import DEGRADE_MODES, STRATEGIES, CorrectionConfig, Strategy, baseline_degrader, bbox_degrader, propagate
from .metrics import evaluate, write_report
from .segnet import ModelConfig, SegNet, load_checkpoint
from .trainer import CYCLE_MODES, TrainConfig, TrainingDiverged, run_training

log = logging.getLogger("cyclevos")

COMMANDS = ("synth", "train", "infer", "eval", "erf", "ablate")


class ConfigError(ValueError):
    pass


# -- value parsers -------------------------------------------------------------------


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected on/off, got {v!r}")


def _int(v) -> int:
    if isinstance(v, bool) or (isinstance(v, float) and not v.is_integer()):
        raise ValueError(f"expected an integer, got {v!r}")
    return int(v)


def _path(v):
    return None if v in (None, "", "none") else str(v)


def _list(item: Callable) -> Callable:
    def parse(v):
        parts = v if isinstance(v, (list, tuple)) else [p for p in str(v).replace(",", " ").split() if p]
        return [item(p) for p in parts]

    return parse


def _choice(*options) -> Callable:
    def parse(v):
        s = str(v)
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return s

    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[Any], Any]
    default: Any
    help: str


SCHEMA: dict[str, Key] = {
    # paths
    "out": Key(_path, None, "output directory"),
    "suite_dir": Key(_path, None, "suite written by `synth` (generated in memory when unset)"),
    "checkpoint": Key(_path, None, "model checkpoint (.cvos)"),
    "baseline_checkpoint": Key(_path, None, "second model for --degrade baseline-predict"),
    "pred_dir": Key(_path, None, "directory of predicted label maps written by `infer`"),
    "split": Key(_choice("train", "val", "eval"), "eval", "suite split to run on"),
    "sequences": Key(_list(str), [], "restrict to these sequence names"),
    # suite
    "seed": Key(_int, 0, "run seed: suite seed for synth, init/data-order seed for train"),
    "suite_seed": Key(_int, 0, "seed of the in-memory suite when no suite_dir is given"),
    "n_train": Key(_int, 20, "training sequences"),
    "n_val": Key(_int, 5, "validation sequences"),
    "n_eval": Key(_int, 5, "evaluation sequences"),
    "size": Key(_int, 64, "frame height and width"),
    "length": Key(_int, 16, "frames per sequence"),
    "max_targets": Key(_int, 2, "maximum target objects per sequence"),
    "n_distractors": Key(_int, 1, "distractor objects per sequence"),
    "radius": Key(_list(float), [6.0, 9.0], "object radius range (px)"),
    "velocity": Key(_list(float), [1.0, 3.0], "object speed range (px/frame)"),
    "noise": Key(float, 0.06, "pixel noise amplitude"),
    # model
    "feat_channels": Key(_int, 16, "encoder width"),
    "key_channels": Key(_int, 8, "key channels"),
    "value_channels": Key(_int, 16, "value channels"),
    # training
    "epochs": Key(_int, 60, "training epochs"),
    "batch_size": Key(_int, 2, "clips per Adam step"),
    "lr": Key(float, 1e-3, "Adam learning rate"),
    "beta1": Key(float, 0.9, "Adam beta1"),
    "beta2": Key(float, 0.999, "Adam beta2"),
    "gamma": Key(float, 1.0, "soft-IoU weight in the segmentation loss"),
    "curriculum_base": Key(_int, 5, "initial maximum frame gap"),
    "curriculum_step": Key(_int, 5, "gap increase per curriculum period"),
    "curriculum_period": Key(_int, 20, "epochs per curriculum period"),
    "cycle_mode": Key(_choice(*CYCLE_MODES), "simple", "backward reference set"),
    "detach_cycle": Key(_bool, False, "stop gradients through the forward prediction in the cycle term"),
    "cycle_weight": Key(float, 1.0, "weight of the cycle term (0 = baseline training)"),
    "augment": Key(_bool, True, "random channel permutation and flips per clip"),
    # inference
    "strategy": Key(_choice(*STRATEGIES), "first+prev", "reference strategy"),
    "mem_period": Key(_int, 5, "MEM append period"),
    "correction": Key(_bool, False, "gradient correction at inference"),
    "alpha": Key(float, 1.0, "correction step size"),
    "iters_n": Key(_int, 10, "correction iterations per corrected frame"),
    "period_k": Key(_int, 5, "correct every k-th predicted frame"),
    "clamp": Key(_bool, True, "clamp corrected masks to [0, 1]"),
    "degrade": Key(_choice("none", *DEGRADE_MODES), "none", "replace kept references"),
    "soft_masks": Key(_bool, False, "also write per-object soft masks as PGM"),
    # cycle-ERF
    "erf_m": Key(_int, 50, "cycle-ERF iterations"),
    "erf_alpha": Key(float, 1000.0, "cycle-ERF step size"),
    "erf_target": Key(_int, 0, "frame whose mask is reconstructed"),
    "erf_reference": Key(_int, 8, "frame whose reference mask is optimized"),
    # ablation
    "seeds": Key(_list(_int), [0, 1, 2], "paired training seeds"),
    "tune_alpha": Key(_bool, True, "pick the correction step on the validation split"),
    "alpha_grid": Key(_list(float), list(ALPHA_GRID), "candidate correction steps"),
    "timing_iters": Key(_list(_int), [2, 5, 10, 20], "iteration counts for the timing fit"),
    "timing_repeats": Key(_int, 2, "timing repeats (fastest kept)"),
}

# desk-scale training recipe used by the ablation harness
ABLATE_DEFAULTS = {"epochs": DESK_TRAIN.epochs, "batch_size": DESK_TRAIN.batch_size, "lr": DESK_TRAIN.lr, "strategy": "mem"}


def canonical(key: str) -> str:
    return key.strip().replace("-", "_")


def parse_value(key: str, value):
    k = canonical(key)
    if k not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return SCHEMA[k].parse(value)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad value for {k}: {err}") from None


def read_config(path) -> dict:
    """Parse a ``key = value`` file or a ``run.json``; unknown keys are an error."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    text = p.read_text()
    if p.suffix == ".json":
        data = json.loads(text)
        raw = data.get("config", data)
        return {canonical(k): parse_value(k, v) for k, v in raw.items()}
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{p}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[canonical(k)] = parse_value(k, v)
    return out


def resolve(command: str, file_cfg: dict, flags: dict) -> dict:
    """Schema defaults, then command defaults, then the config file, then flags."""
    cfg = {k: spec.default for k, spec in SCHEMA.items()}
    if command == "ablate":
        cfg.update(ABLATE_DEFAULTS)
    cfg.update(file_cfg)
    cfg.update({canonical(k): parse_value(k, v) for k, v in flags.items()})
    return cfg


# -- config -> library objects -------------------------------------------------------


def suite_config(c: dict, seed: int) -> SuiteConfig:
    # only non-default generator settings go into overrides, so default runs share cached checkpoints
    base = SynthSpec()
    overrides = {}
    for key in ("radius", "velocity"):
        if len(c[key]) != 2:
            raise ConfigError(f"{key} needs two values (min, max)")
        if tuple(c[key]) != tuple(getattr(base, key)):
            overrides[key] = tuple(c[key])
    if c["noise"] != base.noise:
        overrides["noise"] = c["noise"]
    return SuiteConfig(c["n_train"], c["n_val"], c["n_eval"], c["size"], c["length"], c["max_targets"],
                       c["n_distractors"], seed, overrides)


def model_config(c: dict) -> ModelConfig:
    return ModelConfig(c["size"], c["size"], c["feat_channels"], c["key_channels"], c["value_channels"])


def train_config(c: dict) -> TrainConfig:
    return TrainConfig(
        epochs=c["epochs"], batch_size=c["batch_size"], lr=c["lr"], beta1=c["beta1"], beta2=c["beta2"],
        gamma=c["gamma"], seed=c["seed"], curriculum_base=c["curriculum_base"],
        curriculum_step=c["curriculum_step"], curriculum_period=c["curriculum_period"],
        cycle_mode=c["cycle_mode"], detach_cycle=c["detach_cycle"], cycle_weight=c["cycle_weight"],
        augment=c["augment"],
    )


def correction_config(c: dict, enabled: bool | None = None) -> CorrectionConfig:
    on = c["correction"] if enabled is None else enabled
    return CorrectionConfig(on, c["alpha"], c["iters_n"], c["period_k"], c["clamp"])


def bench_config(c: dict) -> BenchConfig:
    return BenchConfig(
        suite=suite_config(c, c["suite_seed"]),
        model=model_config(c),
        train=train_config(c),
        seeds=tuple(c["seeds"]),
        strategy=c["strategy"],
        mem_period=c["mem_period"],
        iters=c["iters_n"],
        period=c["period_k"],
        alpha=None if c["tune_alpha"] else c["alpha"],
        alpha_grid=tuple(c["alpha_grid"]),
        erf_iters=c["erf_m"],
        erf_alpha=c["erf_alpha"],
        erf_target=c["erf_target"],
        erf_reference=c["erf_reference"],
        timing_iters=tuple(c["timing_iters"]),
    )


def _require(c: dict, *keys: str) -> None:
    for k in keys:
        if c[k] is None:
            raise ConfigError(f"--{k.replace('_', '-')} is required")


def _existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _suite(c: dict) -> dict:
    if c["suite_dir"] is not None:
        _existing(Path(c["suite_dir"]) / "suite.json", "suite manifest")
        return load_suite(c["suite_dir"])
    return generate_suite(suite_config(c, c["suite_seed"]))


def _sequences(c: dict, suite: dict) -> list:
    seqs = suite.get(c["split"], [])
    if c["sequences"]:
        known = {s.name for s in seqs}
        missing = [n for n in c["sequences"] if n not in known]
        if missing:
            raise ConfigError(f"sequences not in split {c['split']!r}: {', '.join(missing)}")
        seqs = [s for s in seqs if s.name in c["sequences"]]
    if not seqs:
        raise ConfigError(f"no sequences in split {c['split']!r}")
    return seqs


def _net(path) -> SegNet:
    mcfg, weights = load_checkpoint(_existing(path, "checkpoint"))
    return SegNet(mcfg, weights)


def _write_run(out: Path, command: str, c: dict) -> None:
    record = {"command": command, "version": __version__, "config": c}
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# -- commands ------------------------------------------------------------------------


def cmd_synth(c: dict, out: Path) -> None:
    """Generate the synthetic benchmark suite."""
    suite = generate_suite(suite_config(c, c["seed"]))
    save_suite(suite, out)
    _write_run(out, "synth", c)
    print(f"suite written to {out} (sha256 {suite_checksum(out)})")


def cmd_train(c: dict, out: Path) -> None:
    """Train one model and write its checkpoint and loss log."""
    from . import report

    suite = _suite(c)
    if not suite.get("train"):
        raise ConfigError("the suite has no training sequences")
    start = time.perf_counter()
    run_training(
        suite["train"], train_config(c), model_config(c), out_dir=out,
        progress=lambda e, loss: log.info("epoch %d  loss %.4f", e, loss),
    )
    _write_run(out, "train", c)
    report.plot_losses({"run": report.read_loss_csv(out / "losses.csv")}, out / "losses.png")
    print(f"checkpoint {out / 'model.cvos'} ({time.perf_counter() - start:.0f}s)")


def _degrader(c: dict, seq):
    if c["degrade"] == "bounding-box":
        return bbox_degrader(seq)
    if c["degrade"] == "baseline-predict":
        _require(c, "baseline_checkpoint")
        return baseline_degrader(_net(c["baseline_checkpoint"]))
    return None


def cmd_infer(c: dict, out: Path) -> None:
    """Propagate masks with a trained model; writes label maps and timing."""
    _require(c, "checkpoint")
    net = _net(c["checkpoint"])
    seqs = _sequences(c, _suite(c))
    strategy = Strategy(c["strategy"], c["mem_period"])
    corr = correction_config(c)
    frames = 0
    seconds = {"configured": 0.0, "uncorrected": 0.0}
    for seq in seqs:
        res = propagate(net, seq, seq.planes(0), strategy, corr, _degrader(c, seq))
        d = out / seq.name
        d.mkdir(parents=True, exist_ok=True)
        for t, lab in enumerate(res.labels):
            write_label_map(d / f"{t:05d}.png", lab)
        if c["soft_masks"]:
            (d / "soft").mkdir(exist_ok=True)
            for t, planes in enumerate(res.scores):
                for o, plane in enumerate(planes):
                    soft_mask_to_pgm(d / "soft" / f"{t:05d}_obj{o + 1}.pgm", plane)
        frames += len(res.scores) - 1
        seconds["configured"] += res.seconds
        if corr.enabled:
            seconds["uncorrected"] += propagate(net, seq, seq.planes(0), strategy, correction_config(c, False),
                                                _degrader(c, seq)).seconds
        else:
            seconds["uncorrected"] += res.seconds
    timing = {
        "frames": frames,
        "correction": corr.enabled,
        "iters_n": c["iters_n"],
        "period_k": c["period_k"],
        "seconds": seconds["configured"],
        "fps": frames / seconds["configured"],
        "fps_uncorrected": frames / seconds["uncorrected"],
        "fps_corrected": frames / seconds["configured"] if corr.enabled else None,
    }
    (out / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    _write_run(out, "infer", c)
    print(f"{len(seqs)} sequences, {frames} frames at {timing['fps']:.1f} fps -> {out}")


def cmd_eval(c: dict, out: Path) -> None:
    """Score predicted label maps against the suite."""
    _require(c, "pred_dir")
    pred_dir = _existing(c["pred_dir"], "prediction directory")
    seqs = _sequences(c, _suite(c))
    preds = {}
    for seq in seqs:
        d = pred_dir / seq.name
        if d.is_dir():
            preds[seq.name] = np.stack([read_label_map(d / f"{t:05d}.png") for t in range(len(seq))])
    if not preds:
        raise ConfigError(f"no predictions for split {c['split']!r} under {pred_dir}")
    fps = None
    if (pred_dir / "timing.json").is_file():
        fps = json.loads((pred_dir / "timing.json").read_text()).get("fps")
    rep = evaluate(preds, seqs, fps=fps)
    write_report(rep, out)
    _write_run(out, "eval", c)
    print(f"J {rep.J:.4f}  F {rep.F:.4f}  J&F {rep.JF:.4f} over {len(rep.per_sequence)} sequences")


def cmd_erf(c: dict, out: Path) -> None:
    """Cycle-ERF heatmaps and the in/ex reconstruction probe."""
    from . import report

    _require(c, "checkpoint")
    net = _net(c["checkpoint"])
    rows, panels = [], []
    for seq in _sequences(c, _suite(c)):
        heat, seq_rows = erf_probe(net, seq, c["erf_m"], c["erf_alpha"], c["erf_target"], c["erf_reference"])
        l = min(c["erf_reference"], len(seq) - 1)
        for o in range(seq.n_objects):
            export_heatmap(out / f"{seq.name}_obj{o + 1}", heat[o])
            panels.append((f"{seq.name} obj{o + 1}", seq.frames[l], heat[o]))
        rows += seq_rows
    report.write_csv(out / "erf.csv", rows)
    report.plot_heatmaps(panels[:8], out / "erf.png")
    _write_run(out, "erf", c)
    inside = sum(r["heat_in"] > r["heat_out"] for r in rows)
    print(f"{len(rows)} objects; in-object heat above out-of-object on {inside}")


def cmd_ablate(c: dict, out: Path) -> None:
    """Paired-seed ablation tables and figures."""
    from . import report

    cfg = bench_config(c)
    suite = _suite(c)
    models = train_arms(cfg, suite, root=out / "runs", progress=lambda m: log.info(m))
    results: dict = {}
    if cfg.alpha is None:
        alpha, sweep = tune_alpha(cfg, models, suite["val"])
        report.write_csv(out / "alpha_sweep.csv", sweep)
        report.plot_alpha(sweep, out / "alpha_sweep.png", alpha)
        results["alpha_sweep"] = sweep
    else:
        alpha = cfg.alpha
    results["alpha"] = alpha
    seqs = suite["eval"]
    log.info("scoring with alpha=%g", alpha)

    tables = {
        "component": component_table(cfg, models, seqs, alpha),
        "strategy": strategy_table(cfg, models, seqs),
        "degradation": degradation_table(cfg, models, seqs, alpha),
    }
    cyclic = SegNet(cfg.model, models[("cyclic", cfg.seeds[0])])
    tables["erf"] = erf_table(cfg, cyclic, seqs, cfg.erf_alpha)
    timing = timing_table(cfg, cyclic, seqs, alpha, repeats=c["timing_repeats"])
    _, props = score(cyclic, seqs, cfg.pipeline(), cfg.correction(alpha))
    ok, total = correction_trend(props)
    results.update(tables)
    results["timing"] = timing
    results["correction_trend"] = {"non_increasing": ok, "corrected": total}

    for name, rows in tables.items():
        report.write_csv(out / f"{name}.csv", rows)
    summary = {
        "component": report.mean_rows(tables["component"], ["variant"], ["J", "F", "JF"]),
        "strategy": report.mean_rows(tables["strategy"], ["strategy"], ["baseline", "cyclic", "delta"]),
        "degradation": report.mean_rows(tables["degradation"], ["reference", "GC"], ["J", "F", "JF"]),
    }
    md = [f"# Ablation ({len(cfg.seeds)} paired seeds, {cfg.strategy} pipeline, correction step {alpha:g})\n"]
    for name, rows in summary.items():
        md += [f"## {name}\n", report.markdown_table(rows)]
    md += ["## timing\n", report.markdown_table(timing["rows"]),
           f"\noverhead slope {timing['slope'] * 1e3:.3f} ms/iteration, R² {timing['r2']:.4f}; "
           f"uncorrected {timing['uncorrected_fps']:.1f} fps\n"]
    erf_in = sum(r["heat_in"] > r["heat_out"] for r in tables["erf"])
    md += ["## cycle-ERF\n", f"in-object heat above out-of-object on {erf_in}/{len(tables['erf'])} objects; "
           f"mean J in {np.mean([r['J_in'] for r in tables['erf']]):.4f}, "
           f"ex {np.mean([r['J_ex'] for r in tables['erf']]):.4f}\n"]
    (out / "summary.md").write_text("\n".join(md))
    (out / "results.json").write_text(json.dumps(results, indent=2) + "\n")

    curves = {f"{arm}-{seed}": report.read_loss_csv(out / "runs" / f"{arm}-{seed}" / "losses.csv")
              for arm, seed in models if (out / "runs" / f"{arm}-{seed}" / "losses.csv").is_file()}
    if curves:
        report.plot_losses(curves, out / "losses.png")
    report.plot_bars(tables["component"], "variant", "JF", out / "component.png", "component ablation")
    report.plot_strategy(tables["strategy"], out / "strategy.png")
    labelled = [{**r, "setting": r["reference"] + ("+GC" if r["GC"] else "")} for r in tables["degradation"]]
    report.plot_bars(labelled, "setting", "JF", out / "degradation.png", "MEM with replaced references")
    report.plot_timing(timing, out / "timing.png")
    _write_run(out, "ablate", c)
    print((out / "summary.md").read_text())


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "erf": cmd_erf,
    "ablate": cmd_ablate,
}


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file or a previous run.json")
    common.add_argument("-v", "--verbose", action="store_true", help="progress logging")
    for key, spec in SCHEMA.items():
        common.add_argument(f"--{key.replace('_', '-')}", dest=key, default=argparse.SUPPRESS, metavar="V",
                            help=f"{spec.help} (default: {spec.default})")
    parser = argparse.ArgumentParser(prog="cyclevos", description="Cycle-consistent video object segmentation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HANDLERS[name].__doc__)
    return parser


def main(argv=None) -> int:
    args = vars(build_parser().parse_args(argv))
    command = args.pop("command")
    logging.basicConfig(level=logging.INFO if args.pop("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = None
    try:
        path = args.pop("config")
        c = resolve(command, read_config(path) if path else {}, args)
        _require(c, "out")
        out = Path(c["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "INCOMPLETE").unlink(missing_ok=True)
        HANDLERS[command](c, out)
    except (ConfigError, ValueError, OSError, KeyError, TrainingDiverged) as err:
        cause = str(err).splitlines()[0] if str(err) else type(err).__name__
        print(f"cyclevos {command}: error: {cause}", file=sys.stderr)
        if out is not None and out.is_dir():
            (out / "INCOMPLETE").write_text(cause + "\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
