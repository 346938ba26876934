"""Versioned binary checkpoint format.

Layout (all integers little-endian)::

    b"MAVN"  u32 version
    u32 len  model config (UTF-8 JSON, sorted keys)
    u64      training step
    u32 len  metadata (UTF-8 JSON, sorted keys)
    u32      tensor count, then per tensor:
             u16 len + name, u8 ndim, ndim x u32 dims, float32 values
    u8       optimizer flag; when 1:
             4 x f64 (lr, beta1, beta2, eps), then per tensor in the same
             order: u64 step count, float32 m values, float32 v values
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import OptimizerConfig
from .model import Model, ModelConfig

MAGIC = b"MAVN"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict  # name -> float32 array
    step: int = 0
    optimizer: Optional[OptimizerConfig] = None
    adam_state: dict = field(default_factory=dict)  # name -> (t, m, v)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, step=0, optimizer: Optional[OptimizerConfig] = None,
                   meta=None) -> "Checkpoint":
        params = model.parameters()
        tensors = {p.name: p.value.astype(np.float32) for p in params}
        adam = {}
        if optimizer is not None:
            adam = {p.name: (p.t, p.adam_m.astype(np.float32), p.adam_v.astype(np.float32)) for p in params}
        return cls(model.config, tensors, step, optimizer, adam, dict(meta or {}))

    def to_model(self) -> Model:
        model = Model(self.config)
        params = model.named_parameters()
        if set(params) != set(self.tensors):
            missing = sorted(set(params) ^ set(self.tensors))
            raise CheckpointError(f"checkpoint tensors do not match the model: {missing[:4]}")
        for name, p in params.items():
            value = self.tensors[name]
            if value.shape != p.value.shape:
                raise CheckpointError(f"{name}: shape {value.shape} != model {p.value.shape}")
            p.value = value.astype(np.float32).copy()
            if name in self.adam_state:
                t, m, v = self.adam_state[name]
                p.t, p.adam_m, p.adam_v = int(t), m.astype(np.float32).copy(), v.astype(np.float32).copy()
        return model

    # -- encoding -------------------------------------------------------------

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        w = out.write
        w(MAGIC)
        w(struct.pack("<I", VERSION))
        config = _json(self.config.to_dict())
        w(struct.pack("<I", len(config)))
        w(config)
        w(struct.pack("<Q", int(self.step)))
        meta = _json(self.meta)
        w(struct.pack("<I", len(meta)))
        w(meta)
        names = list(self.tensors)
        w(struct.pack("<I", len(names)))
        for name in names:
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            key = name.encode("utf-8")
            w(struct.pack("<H", len(key)))
            w(key)
            w(struct.pack("<B", arr.ndim))
            w(struct.pack(f"<{arr.ndim}I", *arr.shape))
            w(arr.tobytes())
        if self.optimizer is None:
            w(struct.pack("<B", 0))
        else:
            w(struct.pack("<B", 1))
            o = self.optimizer
            w(struct.pack("<4d", o.learning_rate, o.beta1, o.beta2, o.epsilon))
            for name in names:
                t, m, v = self.adam_state[name]
                w(struct.pack("<Q", int(t)))
                w(np.ascontiguousarray(m, dtype="<f4").tobytes())
                w(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        r = _Reader(data)
        if r.take(4) != MAGIC:
            raise CheckpointError("not a MAVNet checkpoint (bad magic bytes)")
        (version,) = r.unpack("<I")
        if version != VERSION:
            raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
        config = ModelConfig.from_dict(json.loads(r.take(r.unpack("<I")[0]).decode("utf-8")))
        (step,) = r.unpack("<Q")
        meta = json.loads(r.take(r.unpack("<I")[0]).decode("utf-8"))
        tensors = {}
        for _ in range(r.unpack("<I")[0]):
            name = r.take(r.unpack("<H")[0]).decode("utf-8")
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            tensors[name] = r.array(shape)
        optimizer, adam = None, {}
        if r.unpack("<B")[0]:
            optimizer = OptimizerConfig(*r.unpack("<4d"))
            for name, arr in tensors.items():
                (t,) = r.unpack("<Q")
                adam[name] = (t, r.array(arr.shape), r.array(arr.shape))
        if not r.done:
            raise CheckpointError("trailing bytes after checkpoint payload")
        return cls(config, tensors, step, optimizer, adam, meta)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = bytes(self.data[self.pos:self.pos + n])
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)

    @property
    def done(self) -> bool:
        return self.pos == len(self.data)


def save_checkpoint(path, model: Model, step=0, optimizer: Optional[OptimizerConfig] = None, meta=None) -> Path:
    return Checkpoint.from_model(model, step, optimizer, meta).save(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return Checkpoint.from_bytes(path.read_bytes())
