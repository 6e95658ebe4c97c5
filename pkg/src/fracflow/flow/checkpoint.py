"""Binary checkpoints for :class:`FlowModel`.

Layout (little-endian)::

    "JGRF" | version u16 | D u32 | n_hidden u16 | widths u32 * n_hidden
    | n_freq u16 | max_freq f64 | skip u8 | float32 params | crc32 u32

Parameters follow :class:`FlowModel` order (W0, b0, ..., Wn, bn, then A, a0
when the gated skip is present), each row-major.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

from .mlp import Architecture, FlowError, FlowModel

MAGIC = b"JGRF"
VERSION = 1


class CheckpointError(FlowError):
    pass


def model_to_bytes(model: FlowModel) -> bytes:
    if model.dtype != np.float32:
        raise CheckpointError(f"checkpoints store float32 parameters; model is {model.dtype}")
    arch = model.arch
    head = MAGIC + struct.pack("<HIH", VERSION, arch.dim, len(arch.widths))
    head += struct.pack(f"<{len(arch.widths)}I", *arch.widths)
    head += struct.pack("<HdB", arch.n_freq, arch.max_freq, int(arch.skip))
    body = head + b"".join(p.astype("<f4").tobytes() for p in model.params)
    return body + struct.pack("<I", zlib.crc32(body))


def model_from_bytes(data: bytes) -> FlowModel:
    try:
        if data[:4] != MAGIC:
            raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
        version, dim, n_hidden = struct.unpack_from("<HIH", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported version {version} (this build reads {VERSION})")
        off = 4 + struct.calcsize("<HIH")
        widths = struct.unpack_from(f"<{n_hidden}I", data, off)
        off += 4 * n_hidden
        n_freq, max_freq, skip = struct.unpack_from("<HdB", data, off)
        off += struct.calcsize("<HdB")
    except struct.error:
        raise CheckpointError("truncated checkpoint header") from None
    arch = Architecture(dim=dim, widths=widths, n_freq=n_freq, max_freq=max_freq, skip=bool(skip))
    model = FlowModel(arch, seed=0, dtype=np.float32)
    shapes = [p.shape for p in model.params]
    n_params = sum(int(np.prod(sh)) for sh in shapes)
    need = off + 4 * n_params + 4
    if len(data) != need:
        raise CheckpointError(f"checkpoint has {len(data)} bytes, expected {need} (truncated or padded)")
    (crc,) = struct.unpack_from("<I", data, need - 4)
    if crc != zlib.crc32(data[:need - 4]):
        raise CheckpointError("checkpoint checksum mismatch")
    params = []
    for shape in shapes:
        n = int(np.prod(shape))
        params.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape))
        off += 4 * n
    model.params = params
    return model


def save_checkpoint(model: FlowModel, path, expect_dim: int | None = None) -> None:
    if expect_dim is not None and model.dim != expect_dim:
        raise CheckpointError(f"model dimension {model.dim} != expected {expect_dim}")
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_checkpoint(path, expect_dim: int | None = None) -> FlowModel:
    with open(path, "rb") as fh:
        model = model_from_bytes(fh.read())
    if expect_dim is not None and model.dim != expect_dim:
        raise CheckpointError(f"dimension mismatch: checkpoint D={model.dim}, expected {expect_dim}")
    return model


def save_loss_trace(path, trace) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, loss in trace:
            fh.write(f"{step},{loss:.9g}\n")
