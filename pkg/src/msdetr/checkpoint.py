"""Binary checkpoint: config digest and text header, then named little-endian float64 tensors.

Layout::

    b"MSDETR1\\n"
    uint32 digest length, digest (ascii hex)
    uint32 config length, config text (utf-8 TOML)
    uint32 tensor count
    per tensor: uint32 name length, name, uint32 rank, int64 extents, float64 data
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig
from .numeric import DTYPE

MAGIC = b"MSDETR1\n"


class CheckpointError(ValueError):
    """Malformed checkpoint, or one saved under a different model configuration."""


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _blob(b: bytes) -> bytes:
    return _u32(len(b)) + b


def encode(state: dict, cfg: ExperimentConfig) -> bytes:
    parts = [MAGIC, _blob(cfg.digest().encode()), _blob(cfg.dumps().encode()), _u32(len(state))]
    for name, t in state.items():
        arr = t.detach().cpu().to(DTYPE).numpy()
        parts.append(_blob(name.encode()))
        parts.append(_u32(arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())


def decode(data: bytes) -> tuple[str, str, OrderedDict]:
    """Returns ``(digest, config_text, state)``."""
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    digest = r.blob().decode()
    text = r.blob().decode()
    state = OrderedDict()
    for _ in range(r.u32()):
        name = r.blob().decode()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}q", r.take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return digest, text, state


def save(path, model: torch.nn.Module, cfg: ExperimentConfig) -> None:
    Path(path).write_bytes(encode(model.state_dict(), cfg))


def load(path, cfg: ExperimentConfig | None = None):
    """Read a checkpoint. With ``cfg`` the stored digest must match it.

    Returns ``(cfg, state)`` where ``cfg`` is the stored configuration when
    none was given.
    """
    digest, text, state = decode(Path(path).read_bytes())
    stored = ExperimentConfig.loads(text)
    if stored.digest() != digest:
        raise CheckpointError("stored config text does not match stored digest")
    if cfg is not None and cfg.digest() != digest:
        raise CheckpointError(
            f"config digest mismatch: checkpoint {digest[:12]}, requested {cfg.digest()[:12]}"
        )
    return (cfg or stored), state
