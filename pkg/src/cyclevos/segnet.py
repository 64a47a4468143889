"""Memory-matching segmentation network.

A reduced space-time-memory design: reference (frame, mask) pairs are encoded
into key/value maps, the target frame is encoded into a query key/value, every
query position attends over all memory positions, and a small decoder turns
the readout into a per-object probability plane at input resolution.

Objects are processed independently and merged by soft aggregation.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DOWNSAMPLE = 4
CHECKPOINT_MAGIC = b"CVOS"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    feat_channels: int = 16
    key_channels: int = 8
    value_channels: int = 16
    downsample: int = DOWNSAMPLE

    def __post_init__(self):
        if self.downsample != DOWNSAMPLE:
            raise ValueError(f"downsample factor is fixed at {DOWNSAMPLE}, got {self.downsample}")
        if self.height % DOWNSAMPLE or self.width % DOWNSAMPLE:
            raise ValueError(f"input {self.height}x{self.width} must be divisible by {DOWNSAMPLE}")
        if min(self.feat_channels, self.key_channels, self.value_channels) < 1:
            raise ValueError("channel counts must be >= 1")


def layer_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Conv filter shapes in canonical order; each layer also carries a bias."""
    f, k, v = cfg.feat_channels, cfg.key_channels, cfg.value_channels
    return [
        ("qenc.conv1", (f, 3, 3, 3)),
        ("qenc.conv2", (f, f, 3, 3)),
        ("qenc.conv3", (f, f, 3, 3)),
        ("qenc.key", (k, f, 1, 1)),
        ("qenc.value", (v, f, 1, 1)),
        ("menc.conv1", (f, 4, 3, 3)),
        ("menc.conv2", (f, f, 3, 3)),
        ("menc.conv3", (f, f, 3, 3)),
        ("menc.key", (k, f, 1, 1)),
        ("menc.value", (v, f, 1, 1)),
        ("dec.conv1", (f, 2 * v, 3, 3)),
        ("dec.conv2", (f, f, 3, 3)),
        ("dec.conv3", (1, f, 3, 3)),
    ]


class Weights(dict):
    """Named parameter tensors (``<layer>.w`` / ``<layer>.b``)."""

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "Weights":
        rng = np.random.default_rng(seed)
        w = cls()
        for name, shape in layer_shapes(cfg):
            a = np.sqrt(1.0 / np.prod(shape[1:]))
            w[name + ".w"] = Tensor(rng.uniform(-a, a, size=shape))
            w[name + ".b"] = Tensor(rng.uniform(-a, a, size=shape[0]))
        return w

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "Weights":
        w = cls()
        for name, shape in layer_shapes(cfg):
            w[name + ".w"] = Tensor(np.zeros(shape))
            w[name + ".b"] = Tensor(np.zeros(shape[0]))
        return w

    def _rewrap(self, requires_grad: bool, dtype=None) -> "Weights":
        out = Weights()
        for k, t in self.items():
            arr = t.data if dtype is None else t.data.astype(dtype)
            out[k] = Tensor._wrap(arr, requires_grad=requires_grad)
        return out

    def trainable(self) -> "Weights":
        return self._rewrap(True)

    def frozen(self) -> "Weights":
        return self._rewrap(False)

    def astype(self, dtype) -> "Weights":
        return self._rewrap(False, dtype=np.dtype(dtype))

    def num_params(self) -> int:
        return sum(t.size for t in self.values())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self[k].data).tobytes())
        return h.hexdigest()

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self[k].data.reshape(-1) for k in sorted(self)])

    def from_vector(self, vec) -> "Weights":
        """Rebuild with the same names/shapes from a flat vector (Tensor or array)."""
        out, off = Weights(), 0
        for k in sorted(self):
            n = self[k].size
            if isinstance(vec, Tensor):
                out[k] = T.reshape(_slice(vec, off, n), self[k].shape)
            else:
                out[k] = Tensor(np.asarray(vec[off : off + n]).reshape(self[k].shape))
            off += n
        return out


def _slice(vec: Tensor, off: int, n: int) -> Tensor:
    size, dt = vec.size, vec.data.dtype

    def back(g):
        full = np.zeros(size, dtype=dt)
        full[off : off + n] = g
        return (full,)

    return T._emit("slice", vec.data[off : off + n].copy(), (vec,), back)


@dataclass
class MemoryBank:
    """Per-object memory: one ``(C_k, P)`` key and ``(C_v, P)`` value per reference entry."""

    keys: list
    values: list

    def __len__(self) -> int:
        return len(self.keys)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(zip(self.keys, self.values), key=_entry_digest):
            h.update(_entry_digest((k, v)))
        return h.hexdigest()


def _entry_digest(entry) -> bytes:
    k, v = entry
    h = hashlib.blake2b(np.ascontiguousarray(k.data).tobytes(), digest_size=16)
    h.update(np.ascontiguousarray(v.data).tobytes())
    return h.digest()


def _frame(x, cfg: ModelConfig) -> Tensor:
    x = T.as_tensor(x)
    if x.shape != (3, cfg.height, cfg.width):
        raise ShapeError(f"frame: expected {(3, cfg.height, cfg.width)}, got {x.shape}")
    if x.data.dtype != T.default_dtype():
        x = Tensor(x.data)
    return x


class SegNet:
    def __init__(self, cfg: ModelConfig, weights: Weights):
        self.cfg = cfg
        self.w = weights

    def _conv(self, name: str, x: Tensor, stride: int = 1) -> Tensor:
        w = self.w[name + ".w"]
        return T.conv2d(x, w, self.w[name + ".b"], stride=stride, padding=w.shape[-1] // 2)

    def _encode(self, prefix: str, x: Tensor) -> tuple[Tensor, Tensor]:
        h = T.relu(self._conv(prefix + ".conv1", x, stride=2))
        h = T.relu(self._conv(prefix + ".conv2", h, stride=2))
        h = self._conv(prefix + ".conv3", h)
        return self._conv(prefix + ".key", h), self._conv(prefix + ".value", h)

    def encode_query(self, frame) -> tuple[Tensor, Tensor]:
        x = _frame(frame, self.cfg)
        return self._encode("qenc", T.add_scalar(x, -0.5))

    def encode_memory(self, frame, mask) -> tuple[Tensor, Tensor]:
        """Encode a reference frame with one object's mask plane ``(H, W)``; differentiable in ``mask``."""
        x = _frame(frame, self.cfg)
        m = T.as_tensor(mask)
        if m.shape != (self.cfg.height, self.cfg.width):
            raise ShapeError(f"encode_memory: mask shape {m.shape} does not match frame {x.shape}")
        m = T.reshape(m, (1,) + m.shape)
        return self._encode("menc", T.concat([T.add_scalar(x, -0.5), m], axis=0))

    def read(self, qkey: Tensor, qvalue: Tensor, memory: MemoryBank) -> Tensor:
        return memory_read(qkey, qvalue, memory)

    def decode(self, readout: Tensor) -> Tensor:
        h = T.relu(self._conv("dec.conv1", readout))
        h = T.upsample2x(h)
        h = T.relu(self._conv("dec.conv2", h))
        h = T.upsample2x(h)
        return _plane(T.sigmoid(self._conv("dec.conv3", h)))

    def object_planes(self, refs: Sequence[tuple], target, query=None) -> list[Tensor]:
        """Raw per-object probability planes before aggregation."""
        if not refs:
            raise ValueError("segment: empty reference set")
        masks = [T.as_tensor(m) for _, m in refs]
        n_obj = masks[0].shape[0]
        if any(m.data.ndim != 3 or m.shape[0] != n_obj for m in masks):
            raise ValueError(f"segment: object-count mismatch across references {[m.shape for m in masks]}")
        qk, qv = query if query is not None else self.encode_query(target)
        planes = []
        for o in range(n_obj):
            bank = MemoryBank([], [])
            for (frame, _), m in zip(refs, masks):
                k, v = self.encode_memory(frame, T.index(m, o))
                bank.keys.append(k)
                bank.values.append(v)
            planes.append(self.decode(memory_read(qk, qv, bank)))
        return planes

    def segment(self, refs: Sequence[tuple], target, query=None) -> Tensor:
        """Segment ``target`` from ``refs`` = [(frame (3,H,W), masks (O,H,W)), ...].

        Returns aggregated object scores ``(O, H, W)``, differentiable w.r.t. the
        reference masks (and weights, when they require grad).
        """
        scores, _ = aggregate_objects(self.object_planes(refs, target, query))
        return scores


def _plane(x: Tensor) -> Tensor:
    return T.reshape(x, x.shape[1:])


def memory_read(qkey: Tensor, qvalue: Tensor, memory: MemoryBank) -> Tensor:
    """Attention readout: ``concat(query value, softmax(q.k / sqrt(C_k)) @ memory values)``.

    Entries are put in a content-defined order first, so the result does not
    depend on the order references were supplied in.
    """
    if len(memory) == 0:
        raise ValueError("memory_read: empty memory")
    ck, h, w = qkey.shape
    cv = qvalue.shape[0]
    entries = sorted(zip(memory.keys, memory.values), key=_entry_digest)
    keys = T.concat([T.reshape(k, (ck, -1)) for k, _ in entries], axis=1)
    vals = T.concat([T.reshape(v, (cv, -1)) for _, v in entries], axis=1)
    q = T.transpose(T.reshape(qkey, (ck, h * w)))
    attn = T.softmax(T.mul_scalar(T.matmul(q, keys), 1.0 / np.sqrt(ck)), axis=1)
    read = T.matmul(vals, T.transpose(attn))
    return T.concat([qvalue, T.reshape(read, (cv, h, w))], axis=0)


def attention_weights(qkey: Tensor, memory: MemoryBank) -> np.ndarray:
    """``(P_query, P_memory)`` attention matrix, for inspection."""
    ck = qkey.shape[0]
    q = qkey.data.reshape(ck, -1).T
    k = np.concatenate([k.data.reshape(ck, -1) for k, _ in sorted(zip(memory.keys, memory.values), key=_entry_digest)], axis=1)
    z = q @ k / np.sqrt(ck)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def aggregate_objects(planes: Sequence[Tensor] | Tensor) -> tuple[Tensor, np.ndarray]:
    """Soft-merge per-object probabilities.

    Background score is ``prod(1 - p_i)``; background and object scores are
    normalized to sum to one at every pixel.  Returns the normalized object
    scores ``(O, H, W)`` and a label map (0 = background, i = object i).
    """
    if isinstance(planes, Tensor):
        planes = [T.index(planes, i) for i in range(planes.shape[0])]
    planes = [T.as_tensor(p) for p in planes]
    if not planes:
        raise ValueError("aggregate_objects: no object planes")
    bg = 1.0 - planes[0]
    total = planes[0]
    for p in planes[1:]:
        bg = T.mul(bg, 1.0 - p)
        total = T.add(total, p)
    total = T.add(total, bg)
    scores = [T.div(p, total) for p in planes]
    stacked = T.concat([T.reshape(s, (1,) + s.shape) for s in scores], axis=0)
    bg_score = bg.data / total.data
    labels = np.argmax(np.concatenate([bg_score[None], stacked.data], axis=0), axis=0).astype(np.uint8)
    return stacked, labels


def labels_from_scores(scores) -> np.ndarray:
    """Label map from already-aggregated object scores (background = 1 - sum)."""
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    bg = 1.0 - s.sum(axis=0)
    return np.argmax(np.concatenate([bg[None], s], axis=0), axis=0).astype(np.uint8)


# -- checkpoint file ---------------------------------------------------------------


def save_checkpoint(path, cfg: ModelConfig, weights: Weights) -> None:
    """Write ``CVOS`` checkpoint: magic, version, config ints, then named float32 tensors."""
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    fields = list(asdict(cfg).values())
    buf += struct.pack("<I", len(fields))
    buf += struct.pack(f"<{len(fields)}i", *fields)
    buf += struct.pack("<I", len(weights))
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name].data, dtype="<f4")
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> tuple[ModelConfig, Weights]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (nf,) = struct.unpack_from("<I", data, off)
    off += 4
    fields = struct.unpack_from(f"<{nf}i", data, off)
    off += 4 * nf
    cfg = ModelConfig(*fields)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    weights = Weights()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
        off += 4 * size
        weights[name] = Tensor._wrap(arr)
    return cfg, weights

