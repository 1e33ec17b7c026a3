"""Little-endian binary checkpoint format.

Layout::

    b"GIRN"  u32 version
    u32 len, config JSON (UTF-8, sorted keys)
    tensor table: weights
    u8 has_optim; if set: u64 t, f64 beta1, beta2, eps, base_lr,
                          tensor table m, tensor table v
    u64 epoch, u64 step, u64 seed

    tensor table: u32 count, then per tensor
        u16 len, path (UTF-8), u8 dtype (0 = f32, 1 = f64), u8 rank,
        rank x u32 dims, raw little-endian data
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .model import ModelConfig, check_weights
from .optim import OptimState

MAGIC = b"GIRN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    optim: OptimState | None = None
    epoch: int = 0
    step: int = 0
    seed: int = 0


def _write_table(f: BinaryIO, table: Mapping[str, np.ndarray]) -> None:
    f.write(struct.pack("<I", len(table)))
    for name, arr in table.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        key = name.encode("utf-8")
        f.write(struct.pack("<H", len(key)))
        f.write(key)
        f.write(struct.pack("<BB", code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def _unpack(f: BinaryIO, fmt: str):
    return struct.unpack(fmt, _read_exact(f, struct.calcsize(fmt)))


def _read_table(f: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = _unpack(f, "<I")
    table = {}
    for _ in range(count):
        (klen,) = _unpack(f, "<H")
        name = _read_exact(f, klen).decode("utf-8")
        code, rank = _unpack(f, "<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = _unpack(f, f"<{rank}I")
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(_read_exact(f, nbytes), dtype=dt).reshape(dims)
        table[name] = arr.astype(dt.newbyteorder("="))
    return table


def dumps(ckpt: Checkpoint) -> bytes:
    f = io.BytesIO()
    f.write(MAGIC)
    f.write(struct.pack("<I", VERSION))
    cfg = json.dumps(ckpt.config.to_dict(), sort_keys=True).encode("utf-8")
    f.write(struct.pack("<I", len(cfg)))
    f.write(cfg)
    _write_table(f, ckpt.weights)
    if ckpt.optim is None:
        f.write(struct.pack("<B", 0))
    else:
        o = ckpt.optim
        f.write(struct.pack("<B", 1))
        f.write(struct.pack("<Q4d", o.t, o.beta1, o.beta2, o.eps, o.base_lr))
        _write_table(f, o.m)
        _write_table(f, o.v)
    f.write(struct.pack("<3Q", ckpt.epoch, ckpt.step, ckpt.seed))
    return f.getvalue()


def loads(buf: bytes, expected: ModelConfig | None = None) -> Checkpoint:
    f = io.BytesIO(buf)
    if _read_exact(f, 4) != MAGIC:
        raise CheckpointError("not a GIRN checkpoint (bad magic)")
    (version,) = _unpack(f, "<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (clen,) = _unpack(f, "<I")
    config = ModelConfig.from_dict(json.loads(_read_exact(f, clen).decode("utf-8")))
    if expected is not None and expected != config:
        raise CheckpointError(f"checkpoint config {config} does not match requested {expected}")
    weights = _read_table(f)
    (has_optim,) = _unpack(f, "<B")
    optim = None
    if has_optim:
        t, b1, b2, eps, base_lr = _unpack(f, "<Q4d")
        m = _read_table(f)
        v = _read_table(f)
        optim = OptimState(m=m, v=v, t=t, beta1=b1, beta2=b2, eps=eps, base_lr=base_lr)
    epoch, step, seed = _unpack(f, "<3Q")
    from .autodiff import Tensor

    check_weights({k: Tensor(a) for k, a in weights.items()}, config)
    return Checkpoint(config, weights, optim, epoch, step, seed)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically so an interrupted save never clobbers the previous file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    return loads(Path(path).read_bytes(), expected)
