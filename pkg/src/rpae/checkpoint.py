"""Binary checkpoints.

Layout (all integers little-endian)::

    b"RPAE1"
    u32 header length, then UTF-8 JSON {"kind": ..., "config": {...}, "threshold": ...}
    u32 parameter count
    per parameter: u16 name length, name, u8 ndim, ndim * u32 dims,
                   prod(dims) float32 values
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import BaselineModel, ModelConfig, RpaeModel

MAGIC = b"RPAE1"
KINDS = {"rpae": RpaeModel, "baseline": BaselineModel}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model) -> None:
    """Write ``model``; its ``threshold`` (calibrated THI threshold or None) rides in the header."""
    header = json.dumps({"kind": model.kind, "config": model.config.to_dict(),
                         "threshold": model.threshold}, sort_keys=True).encode()
    params = model.parameters()
    chunks = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(params))]
    for p in params:
        name = p.name.encode()
        chunks.append(struct.pack("<H", len(name)) + name)
        chunks.append(struct.pack(f"<B{p.value.ndim}I", p.value.ndim, *p.value.shape))
        chunks.append(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an RPAE checkpoint")
    try:
        pos = len(MAGIC)
        (hlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        header = json.loads(data[pos:pos + hlen])
        pos += hlen
        cls = KINDS[header["kind"]]
        model = cls(ModelConfig.from_dict(header["config"]))
        model.threshold = header.get("threshold")
        expected = model.named_parameters()
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if count != len(expected):
            raise CheckpointError(f"{path}: {count} parameters, model has {len(expected)}")
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape))
            values = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            param = expected.get(name)
            if param is None or param.value.shape != shape:
                raise CheckpointError(f"{path}: unexpected parameter {name} {shape}")
            param.value = values.astype(np.float32)
            param.grad = np.zeros_like(param.value)
    except (struct.error, KeyError, TypeError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return model
