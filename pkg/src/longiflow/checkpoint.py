"""Binary checkpoint format for named parameters and optimizer state.

Layout: magic, a count of parameter records, the records themselves
(length-prefixed UTF-8 name, rank, dims, raw float32 little-endian data),
a second count plus records for optimizer state, then a metadata block
holding the epoch, the run seed, and the config hash. Records are written
in sorted name order so saves are canonical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import FormatError
from .optim import AdamState
from .tensor import Tensor

_MAGIC = b"LFC1"


def _write_record(f, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)
    f.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_record(blob: bytes, off: int) -> tuple[str, np.ndarray, int]:
    if off + 4 > len(blob):
        raise FormatError("truncated record header")
    (name_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    name = blob[off:off + name_len].decode("utf-8")
    off += name_len
    (rank,) = struct.unpack_from("<I", blob, off)
    off += 4
    if rank > 8:
        raise FormatError(f"record {name}: implausible rank {rank}")
    shape = struct.unpack_from(f"<{rank}I", blob, off)
    off += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    end = off + 4 * count
    if end > len(blob):
        raise FormatError(f"record {name}: truncated payload")
    arr = np.frombuffer(blob[off:end], dtype="<f4").reshape(shape)
    return name, arr.astype(np.float32, copy=True), end


@dataclass
class Checkpoint:
    params: dict = field(default_factory=dict)
    opt: dict = field(default_factory=dict)
    epoch: int = 0
    seed: int = 0
    config_hash: str = ""


def save_checkpoint(path, params: dict[str, Tensor], opt: AdamState | None,
                    epoch: int, seed: int, config_hash: str = "") -> None:
    names = sorted(params)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(names)))
        for name in names:
            _write_record(f, name, params[name].data)
        opt_records: dict[str, np.ndarray] = {}
        if opt is not None:
            for name in names:
                opt_records[f"m.{name}"] = opt.m[name]
                opt_records[f"v.{name}"] = opt.v[name]
            opt_records["step"] = np.asarray(float(opt.step))
        f.write(struct.pack("<I", len(opt_records)))
        for name in sorted(opt_records):
            _write_record(f, name, opt_records[name])
        f.write(struct.pack("<IQ", epoch, seed))
        hraw = config_hash.encode("utf-8")
        f.write(struct.pack("<I", len(hraw)))
        f.write(hraw)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != _MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    try:
        (n_params,) = struct.unpack_from("<I", blob, 4)
        off = 8
        ck = Checkpoint()
        for _ in range(n_params):
            name, arr, off = _read_record(blob, off)
            ck.params[name] = arr
        (n_opt,) = struct.unpack_from("<I", blob, off)
        off += 4
        for _ in range(n_opt):
            name, arr, off = _read_record(blob, off)
            ck.opt[name] = arr
        epoch, seed = struct.unpack_from("<IQ", blob, off)
        off += 12
        (hash_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        ck.config_hash = blob[off:off + hash_len].decode("utf-8")
    except (struct.error, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint ({e})") from e
    ck.epoch = epoch
    ck.seed = seed
    return ck


def restore_params(params: dict[str, Tensor], ck: Checkpoint) -> None:
    """Copy checkpoint values into live parameters, casting to their dtype."""
    missing = sorted(set(params) - set(ck.params))
    extra = sorted(set(ck.params) - set(params))
    if missing or extra:
        raise FormatError(
            f"checkpoint does not match model: missing {missing[:3]}, "
            f"unexpected {extra[:3]}")
    for name, p in params.items():
        arr = ck.params[name]
        if arr.shape != p.data.shape:
            raise FormatError(
                f"parameter {name}: checkpoint shape {arr.shape} vs "
                f"model shape {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)


def restore_optimizer(params: dict[str, Tensor], ck: Checkpoint,
                      state: AdamState) -> AdamState:
    if not ck.opt:
        return state
    for name in params:
        m = ck.opt.get(f"m.{name}")
        v = ck.opt.get(f"v.{name}")
        if m is None or v is None:
            raise FormatError(f"optimizer state missing for {name}")
        state.m[name] = m.astype(params[name].data.dtype, copy=True)
        state.v[name] = v.astype(params[name].data.dtype, copy=True)
    step = ck.opt.get("step")
    state.step = int(step) if step is not None else 0
    return state
