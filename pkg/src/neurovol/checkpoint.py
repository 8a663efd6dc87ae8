"""NVC1 checkpoint files.

Layout (little-endian)::

    b"NVC1"
    u32 header length, header JSON (utf-8): arch config, parameter names,
        optimizer hyperparameters (or null), free-form metadata
    per parameter, in declaration order: u32 ndim, u32 dims..., f32 data
    if optimizer state present: the m tensors, then the v tensors, same encoding
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import DataError
from .model import ArchConfig, Model, param_names
from .optimizer import AdamState

MAGIC = b"NVC1"


def _write_tensor(f, arr: np.ndarray):
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataError(f"{self.path}: truncated checkpoint")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self) -> np.ndarray:
        ndim = self.u32()
        dims = struct.unpack(f"<{ndim}I", self.take(4 * ndim))
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(self.take(4 * n), dtype="<f4")
        return data.reshape(dims).astype(np.float32)


def save_checkpoint(path, model: Model, state: AdamState | None = None, meta: dict | None = None):
    names = list(model.params)
    header = {
        "arch": model.config.to_dict(),
        "params": names,
        "optimizer": state.hyper() if state is not None else None,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in names:
            _write_tensor(f, model.params[name])
        if state is not None:
            for moments in (state.m, state.v):
                for name in names:
                    _write_tensor(f, moments[name])


def load_checkpoint(path):
    """Return ``(model, adam_state_or_None, meta)``."""
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: not an NVC1 checkpoint")
    header = json.loads(r.take(r.u32()).decode())
    config = ArchConfig.from_dict(header["arch"])
    names = header["params"]
    params = {name: r.tensor() for name in names}
    state = None
    if header["optimizer"] is not None:
        state = AdamState(**header["optimizer"])
        state.m = {name: r.tensor() for name in names}
        state.v = {name: r.tensor() for name in names}
    if r.pos != len(raw):
        raise DataError(f"{path}: {len(raw) - r.pos} trailing bytes")
    if names != param_names(config):
        raise DataError(f"{path}: parameter list does not match architecture")
    return Model(config, params), state, header["meta"]
