"""Binary checkpoint format ``ATCN1``.

Layout (all integers little-endian)::

    b"ATCN1"
    u64 header length, header (canonical JSON)
    records: u64 name length, name (utf-8), u64 rank, rank x u64 dims,
             prod(dims) x f64 values
    u32 CRC-32 of every preceding byte

Records hold parameters, batch-norm buffers (``buf/``) and optimizer state
(``opt.m/``, ``opt.v/``, ``opt.slow/``).  The header lists the record count.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import Model, ModelConfig

MAGIC = b"ATCN1"
FORMAT_VERSION = "ATCN1"


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_checkpoint(model: Model, optimizer=None, epoch: int = 0, train_config=None, curve=None) -> bytes:
    records: list[tuple[str, np.ndarray]] = [(p.name, p.data) for p in model.parameters()]
    records += [(f"buf/{k}", v) for k, v in sorted(model.buffers().items())]
    step_count = 0
    if optimizer is not None:
        records += sorted(optimizer.state_arrays().items())
        step_count = optimizer.step_count
    header = {
        "format": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "epoch": int(epoch),
        "step_count": int(step_count),
        "seed": int(train_config.seed if train_config is not None else model.config.seed),
        "records": len(records),
        "curve": curve or [],
    }
    hbytes = _canonical(header)
    parts = [MAGIC, struct.pack("<Q", len(hbytes)), hbytes]
    for name, arr in records:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<Q", len(nb)) + nb)
        parts.append(struct.pack(f"<Q{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def save_checkpoint(model: Model, path, optimizer=None, epoch: int = 0, train_config=None, curve=None) -> None:
    """Write atomically: temp file in the same directory, then rename."""
    data = encode_checkpoint(model, optimizer, epoch, train_config, curve)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def decode_checkpoint(data: bytes) -> dict:
    if len(data) < len(MAGIC) + 12:
        raise CheckpointError("checkpoint truncated")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"not an {FORMAT_VERSION} checkpoint (bad magic)")
    body, tail = data[:-4], data[-4:]
    if zlib.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", tail)[0]:
        raise CheckpointError("checksum mismatch; file is corrupted or truncated")
    r = _Reader(body)
    r.take(len(MAGIC))
    try:
        header = json.loads(r.take(r.u64()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format')!r}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(int(header["records"])):
        name = r.take(r.u64()).decode("utf-8")
        rank = r.u64()
        if rank > 8:
            raise CheckpointError(f"implausible rank {rank} for record {name!r}")
        dims = tuple(r.u64() for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after last record")
    return {"header": header, "arrays": arrays}


def load_checkpoint(path) -> dict:
    """Returns ``model``, ``epoch``, ``step_count``, ``optimizer`` arrays,
    ``train_config`` dict, ``curve`` and ``seed``.  Nothing is built unless
    the whole file validates."""
    with open(path, "rb") as fh:
        raw = fh.read()
    decoded = decode_checkpoint(raw)
    header, arrays = decoded["header"], decoded["arrays"]
    try:
        config = ModelConfig.from_dict(header["config"])
    except Exception as exc:
        raise CheckpointError(f"invalid config in checkpoint: {exc}") from None
    model = Model(config)
    for p in model.parameters():
        if p.name not in arrays or arrays[p.name].shape != p.shape:
            raise CheckpointError(f"parameter {p.name!r} missing or mis-shaped")
        p.data = arrays[p.name].copy()
        p.zero_grad()
    bufs = {}
    for k, v in model.buffers().items():
        key = f"buf/{k}"
        if key not in arrays or arrays[key].shape != v.shape:
            raise CheckpointError(f"buffer {k!r} missing or mis-shaped")
        bufs[k] = arrays[key]
    model.set_buffers(bufs)
    return {
        "model": model,
        "epoch": header["epoch"],
        "step_count": header["step_count"],
        "optimizer": {k: v for k, v in arrays.items() if k.startswith("opt.")},
        "train_config": header["train_config"],
        "curve": header["curve"],
        "seed": header["seed"],
    }
