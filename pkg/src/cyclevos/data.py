"""Synthetic moving-shape videos with look-alike distractors, and DAVIS-style sequence IO.

Layout on disk::

    <root>/suite.json
    <root>/<seq>/frames/00000.png   RGB, 8 bit
    <root>/<seq>/masks/00000.png    8-bit indexed, 0 = background, i = object i
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

SHAPES = ("square", "disc", "bar", "triangle")


@dataclass
class VideoSequence:
    name: str
    frames: np.ndarray  # (T, 3, H, W) float32 in [0, 1]
    masks: list  # per frame: (H, W) uint8 label map or None
    n_objects: int

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[1] != 3:
            raise ValueError(f"{self.name}: frames must be (T, 3, H, W), got {self.frames.shape}")
        if len(self.frames) < 2:
            raise ValueError(f"{self.name}: need at least 2 frames")
        if len(self.masks) != len(self.frames):
            raise ValueError(f"{self.name}: {len(self.masks)} masks for {len(self.frames)} frames")
        hw = self.frames.shape[2:]
        for t, m in enumerate(self.masks):
            if m is None:
                continue
            if m.shape != hw:
                raise ValueError(f"{self.name}: mask {t} has shape {m.shape}, frames are {hw}")
            if m.max(initial=0) > self.n_objects:
                raise ValueError(f"{self.name}: mask {t} has object id {m.max()} > {self.n_objects}")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[3]

    def has_gt(self, t: int) -> bool:
        return self.masks[t] is not None

    @property
    def fully_annotated(self) -> bool:
        return all(m is not None for m in self.masks)

    def planes(self, t: int) -> np.ndarray:
        """One-hot object planes ``(O, H, W)`` for frame ``t``."""
        return label_to_planes(self.masks[t], self.n_objects)


def label_to_planes(labels: np.ndarray, n_objects: int) -> np.ndarray:
    ids = np.arange(1, n_objects + 1)[:, None, None]
    return (labels[None] == ids).astype(np.float32)


# -- generation -------------------------------------------------------------------


@dataclass
class SynthSpec:
    size: int = 64
    length: int = 16
    n_targets: int = 1
    n_distractors: int = 1
    shapes: tuple = SHAPES
    radius: tuple = (6, 9)
    velocity: tuple = (1.0, 3.0)
    noise: float = 0.06
    distractor_similar: bool = True
    occlusion: bool = True
    seed: int = 0
    name: str = ""


def render_shape(kind: str, center, radius: float, angle: float, h: int, w: int) -> np.ndarray:
    """Boolean footprint of a shape, by pixel-centre inclusion.

    ``square`` is axis aligned with side ``2 * radius``; ``bar`` is a
    ``2.4r x 0.8r`` rectangle rotated by ``angle``; ``triangle`` is
    equilateral with circumradius ``radius``.
    """
    cy, cx = center
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dx) < radius) & (np.abs(dy) < radius)
    if kind == "disc":
        return dx * dx + dy * dy <= radius * radius
    if kind == "bar":
        c, s = np.cos(angle), np.sin(angle)
        u, v = c * dx + s * dy, -s * dx + c * dy
        return (np.abs(u) <= 1.2 * radius) & (np.abs(v) <= 0.4 * radius)
    if kind == "triangle":
        inside = np.ones((h, w), dtype=bool)
        for k in range(3):
            a = angle + 2 * np.pi * k / 3
            # half-plane facing the edge opposite vertex k
            inside &= -(np.cos(a) * dx + np.sin(a) * dy) <= radius / 2
        return inside
    raise ValueError(f"unknown shape {kind!r}")


def _background(rng, size: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.55, size=(3, 4, 4))
    bg = ndimage.zoom(coarse, (1, size / 4, size / 4), order=1)
    return bg[:, :size, :size]


def _trajectory(rng, spec: SynthSpec, radius: float) -> np.ndarray:
    s = spec.size
    lo, hi = radius + 1, s - 2 - radius
    pos = rng.uniform(lo, hi, size=2)
    speed = rng.uniform(*spec.velocity)
    theta = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.sin(theta), np.cos(theta)])
    out = np.empty((spec.length, 2))
    for t in range(spec.length):
        out[t] = pos
        pos = pos + vel
        for d in range(2):
            if pos[d] < lo or pos[d] > hi:
                vel[d] = -vel[d]
                pos[d] = np.clip(pos[d], lo, hi)
    return out


def _validate(spec: SynthSpec) -> None:
    if spec.length < 2:
        raise ValueError("infeasible spec: length must be >= 2")
    if spec.n_targets < 1:
        raise ValueError("infeasible spec: need at least one target object")
    if spec.n_targets > 255:
        raise ValueError("infeasible spec: at most 255 objects fit an 8-bit mask")
    if 2 * spec.radius[1] + 4 > spec.size:
        raise ValueError(f"infeasible spec: radius {spec.radius[1]} does not fit a {spec.size}px canvas")
    area = (spec.n_targets + spec.n_distractors) * (2 * spec.radius[1]) ** 2
    if not spec.occlusion and area > 0.5 * spec.size**2:
        raise ValueError("infeasible spec: objects + distractors do not fit the canvas without occlusion")
    if spec.velocity[0] < 0 or spec.velocity[0] > spec.velocity[1]:
        raise ValueError(f"infeasible spec: bad velocity range {spec.velocity}")
    if any(k not in SHAPES for k in spec.shapes):
        raise ValueError(f"infeasible spec: unknown shapes in {spec.shapes}")


def generate_synthetic(spec: SynthSpec) -> VideoSequence:
    """Render one sequence; deterministic in ``spec.seed``.

    Distractors are painted first and never appear in the masks; targets are
    painted on top, later targets occluding earlier ones.  Frames are
    quantized to 8-bit levels so they survive a PNG round trip exactly.
    """
    _validate(spec)
    for attempt in range(200):
        rng = np.random.default_rng([spec.seed, attempt])
        seq = _try_generate(rng, spec)
        if seq is not None:
            return seq
    raise ValueError("infeasible spec: could not place objects without occlusion")


def _try_generate(rng, spec: SynthSpec) -> VideoSequence | None:
    s, n_t = spec.size, spec.n_targets
    target_kinds = [spec.shapes[i] for i in rng.integers(len(spec.shapes), size=n_t)]
    colors = [rng.uniform(0.55, 1.0, size=3) * rng.permutation([1.0, 1.0, 0.25]) for _ in range(n_t)]
    objects = []  # (kind, radius, angle, color, trajectory, label)
    for i in range(spec.n_distractors):
        j = i % n_t
        others = [k for k in spec.shapes if k != target_kinds[j]] or list(spec.shapes)
        kind = others[rng.integers(len(others))]
        if spec.distractor_similar:
            color = np.clip(colors[j] + rng.uniform(-spec.noise, spec.noise, size=3), 0, 1)
        else:
            color = rng.uniform(0.0, 1.0, size=3)
        r = rng.uniform(*spec.radius)
        objects.append((kind, r, rng.uniform(0, np.pi), color, _trajectory(rng, spec, r), 0))
    for i in range(n_t):
        r = rng.uniform(*spec.radius)
        objects.append((target_kinds[i], r, rng.uniform(0, np.pi), colors[i], _trajectory(rng, spec, r), i + 1))
    bg = _background(rng, s)
    frames = np.empty((spec.length, 3, s, s), dtype=np.float32)
    masks = []
    for t in range(spec.length):
        img = bg + rng.normal(0, spec.noise / 2, size=bg.shape)
        label = np.zeros((s, s), dtype=np.uint8)
        painted = np.zeros((s, s), dtype=bool)
        for kind, r, ang, color, traj, lab in objects:
            fp = render_shape(kind, traj[t], r, ang, s, s)
            if not spec.occlusion and np.any(fp & painted):
                return None
            painted |= fp
            img[:, fp] = color[:, None] + rng.normal(0, spec.noise, size=(3, int(fp.sum())))
            label[fp] = lab
        for lab in range(1, n_t + 1):
            if not np.any(label == lab):
                return None  # a target fully hidden breaks the first-frame contract
        frames[t] = np.round(np.clip(img, 0, 1) * 255) / 255
        masks.append(label)
    return VideoSequence(spec.name or f"synth{spec.seed:05d}", frames, masks, n_t)


@dataclass
class SuiteConfig:
    n_train: int = 20
    n_val: int = 5
    n_eval: int = 5
    size: int = 64
    length: int = 16
    max_targets: int = 2
    n_distractors: int = 1
    seed: int = 0
    overrides: dict = field(default_factory=dict)


def generate_suite(cfg: SuiteConfig) -> dict[str, list[VideoSequence]]:
    """Train/val/eval splits of synthetic sequences with independent per-sequence seeds."""
    rng = np.random.default_rng(cfg.seed)
    suite: dict[str, list[VideoSequence]] = {}
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("eval", cfg.n_eval)):
        seqs = []
        for i in range(n):
            spec = SynthSpec(
                size=cfg.size,
                length=cfg.length,
                n_targets=int(rng.integers(1, cfg.max_targets + 1)),
                n_distractors=cfg.n_distractors,
                seed=int(rng.integers(2**31)),
                name=f"{split}{i:03d}",
                **cfg.overrides,
            )
            seqs.append(generate_synthetic(spec))
        suite[split] = seqs
    return suite


# -- file IO ---------------------------------------------------------------------------

_NUM = re.compile(r"^(\d+)\.(png|ppm)$")


def _palette() -> list[int]:
    pal = [0, 0, 0]
    for i in range(1, 256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal += [r, g, b]
    return pal


def write_label_map(path, labels: np.ndarray) -> None:
    img = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    img.putpalette(_palette())
    img.save(path)


def read_label_map(path) -> np.ndarray:
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        raise ValueError(f"{path}: expected an indexed or grayscale mask, got mode {img.mode}")
    return np.array(img, dtype=np.uint8)


def save_sequence(seq: VideoSequence, root) -> Path:
    d = Path(root) / seq.name
    (d / "frames").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(seq.frames):
        rgb = np.round(np.transpose(frame, (1, 2, 0)) * 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(d / "frames" / f"{t:05d}.png")
        if seq.masks[t] is not None:
            write_label_map(d / "masks" / f"{t:05d}.png", seq.masks[t])
    return d


def _numbered(folder: Path) -> dict[int, Path]:
    out = {}
    if not folder.is_dir():
        return out
    for p in folder.iterdir():
        m = _NUM.match(p.name)
        if m:
            out[int(m.group(1))] = p
    return out


def load_sequence(path, n_objects: int | None = None) -> VideoSequence:
    """Load ``<seq>/frames`` + ``<seq>/masks``; the first-frame mask is mandatory."""
    d = Path(path)
    frames_by_n = _numbered(d / "frames")
    if not frames_by_n:
        raise FileNotFoundError(f"{d}: no frames found")
    nums = sorted(frames_by_n)
    if nums != list(range(nums[0], nums[0] + len(nums))):
        raise ValueError(f"{d}: non-contiguous frame numbering {nums}")
    masks_by_n = _numbered(d / "masks")
    if nums[0] not in masks_by_n:
        raise ValueError(f"{d}: missing mask for the first frame")
    frames, masks = [], []
    for n in nums:
        rgb = np.array(Image.open(frames_by_n[n]).convert("RGB"), dtype=np.float32) / 255
        frames.append(np.transpose(rgb, (2, 0, 1)))
        masks.append(read_label_map(masks_by_n[n]) if n in masks_by_n else None)
    hw = frames[0].shape
    for n, f in zip(nums, frames):
        if f.shape != hw:
            raise ValueError(f"{d}: frame {n} has shape {f.shape[1:]}, expected {hw[1:]}")
    if n_objects is None:
        n_objects = max(int(m.max()) for m in masks if m is not None)
    return VideoSequence(d.name, np.stack(frames), masks, n_objects)


def save_suite(suite: dict[str, list[VideoSequence]], root, meta: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for split, seqs in suite.items():
        for seq in seqs:
            save_sequence(seq, root)
            entries.append({"name": seq.name, "split": split, "n_objects": seq.n_objects, "length": len(seq)})
    manifest = {"sequences": entries, **(meta or {})}
    (root / "suite.json").write_text(json.dumps(manifest, indent=2))
    return root / "suite.json"


def load_suite(root) -> dict[str, list[VideoSequence]]:
    root = Path(root)
    manifest = json.loads((root / "suite.json").read_text())
    suite: dict[str, list[VideoSequence]] = {}
    for e in manifest["sequences"]:
        seq = load_sequence(root / e["name"], n_objects=e.get("n_objects"))
        suite.setdefault(e["split"], []).append(seq)
    return suite


# -- analysis exports -----------------------------------------------------------------


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary portable graymap."""
    a = np.asarray(img, dtype=np.uint8)
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + a.tobytes())


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PGM_HEADER.match(data)
    if not m:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    return np.frombuffer(data[m.end() : m.end() + w * h], dtype=np.uint8).reshape(h, w)


def soft_mask_to_pgm(path, plane: np.ndarray) -> None:
    write_pgm(path, np.round(np.clip(plane, 0, 1) * 255))


def write_float_sidecar(path, arr: np.ndarray) -> None:
    """Raw little-endian float32 with a one-line text header ``float32-le <dims>``."""
    a = np.ascontiguousarray(arr, dtype="<f4")
    header = "float32-le " + " ".join(str(d) for d in a.shape) + "\n"
    Path(path).write_bytes(header.encode() + a.tobytes())


def read_float_sidecar(path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    tag, *dims = data[:nl].decode().split()
    if tag != "float32-le":
        raise ValueError(f"{path}: unknown sidecar header {tag!r}")
    shape = tuple(int(d) for d in dims)
    return np.frombuffer(data[nl + 1 :], dtype="<f4").reshape(shape).copy()


def suite_checksum(root) -> str:
    """SHA-256 over every suite file and its relative path; the run record is excluded."""
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file() and p.name != "run.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()

