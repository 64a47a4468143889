"""Region similarity J, boundary F-measure and their mean, following the DAVIS protocol."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

_CROSS = ndimage.generate_binary_structure(2, 1)


def _check_id(object_id: int, n_objects: int | None) -> None:
    if object_id < 1 or (n_objects is not None and object_id > n_objects):
        raise ValueError(f"unknown object id {object_id}" + (f" (sequence has {n_objects})" if n_objects else ""))


def jaccard(pred: np.ndarray, gt: np.ndarray, object_id: int = 1, n_objects: int | None = None) -> float:
    """IoU of the object's pixel sets in two label maps; 1.0 when both are empty."""
    if pred.shape != gt.shape:
        raise ValueError(f"jaccard: shape mismatch {pred.shape} vs {gt.shape}")
    _check_id(object_id, n_objects)
    p, g = pred == object_id, gt == object_id
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of ``mask`` whose 4-neighbourhood leaves the mask (outside the image counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def disc(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return yy * yy + xx * xx <= r * r


def default_tolerance(shape) -> int:
    return max(1, int(round(0.0075 * float(np.hypot(*shape)))))


def boundary_f(
    pred: np.ndarray, gt: np.ndarray, object_id: int = 1, tolerance: int | None = None, n_objects: int | None = None
) -> float:
    """Contour F-measure with boundary pixels matched within ``tolerance`` px (Euclidean disc)."""
    if pred.shape != gt.shape:
        raise ValueError(f"boundary_f: shape mismatch {pred.shape} vs {gt.shape}")
    _check_id(object_id, n_objects)
    r = default_tolerance(gt.shape) if tolerance is None else tolerance
    if r < 0:
        raise ValueError(f"boundary_f: tolerance must be >= 0, got {r}")
    bp, bg = boundary(pred == object_id), boundary(gt == object_id)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    se = disc(r)
    near_g = ndimage.binary_dilation(bg, structure=se) if r > 0 else bg
    near_p = ndimage.binary_dilation(bp, structure=se) if r > 0 else bp
    precision = np.count_nonzero(bp & near_g) / n_p
    recall = np.count_nonzero(bg & near_p) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


@dataclass
class EvalReport:
    per_sequence: dict = field(default_factory=dict)  # name -> {object id: {"J": .., "F": ..}}
    J: float = 0.0
    F: float = 0.0
    JF: float = 0.0
    fps: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        d["per_sequence"] = {s: {str(k): v for k, v in objs.items()} for s, objs in self.per_sequence.items()}
        return json.dumps(d, indent=2)


def evaluate_sequence(pred_labels: np.ndarray, gt_masks, n_objects: int, tolerance: int | None = None):
    """Per-object mean J and F over frames 1..T-1 that have ground truth; None if none do."""
    frames = [t for t in range(1, len(gt_masks)) if gt_masks[t] is not None]
    if not frames:
        return None
    out = {}
    for obj in range(1, n_objects + 1):
        js = [jaccard(pred_labels[t], gt_masks[t], obj) for t in frames]
        fs = [boundary_f(pred_labels[t], gt_masks[t], obj, tolerance) for t in frames]
        out[obj] = {"J": float(np.mean(js)), "F": float(np.mean(fs))}
    return out


def evaluate(predictions: Mapping[str, np.ndarray], sequences, fps: float | None = None, tolerance=None) -> EvalReport:
    """Average per-object scores over frames, then objects, then sequences.

    ``predictions`` maps sequence name to a ``(T, H, W)`` label map stack;
    ``sequences`` is an iterable of :class:`~cyclevos.data.VideoSequence`.
    """
    report = EvalReport(fps=fps)
    js, fs = [], []
    for seq in sequences:
        if seq.name not in predictions:
            log.warning("no prediction for %s; skipped", seq.name)
            continue
        res = evaluate_sequence(predictions[seq.name], seq.masks, seq.n_objects, tolerance)
        if res is None:
            log.warning("%s has no ground truth beyond frame 1; skipped", seq.name)
            continue
        report.per_sequence[seq.name] = res
        js.append(np.mean([v["J"] for v in res.values()]))
        fs.append(np.mean([v["F"] for v in res.values()]))
    if js:
        report.J = float(np.mean(js))
        report.F = float(np.mean(fs))
        report.JF = (report.J + report.F) / 2
    return report


def write_report(report: EvalReport, out_dir, stem: str = "eval") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "object", "J", "F", "JF"])
        for name, objs in report.per_sequence.items():
            for obj, v in objs.items():
                w.writerow([name, obj, f"{v['J']:.6f}", f"{v['F']:.6f}", f"{(v['J'] + v['F']) / 2:.6f}"])
    (out / f"{stem}.json").write_text(report.to_json())
