"""Single-file checkpoint: versioned header, JSON config, raw float64 records, SHA-256 trailer.

Layout (all integers little-endian)::

    b"SEGATTCK"  u32 version  u32 header_len  header (UTF-8 JSON)
    u32 n_records
    n_records x ( u16 name_len  name  u8 ndim  u32 dims[ndim]  f64 data[prod(dims)] )
    sha256 of everything above (32 bytes)
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from segatt.grad import Parameter
from segatt.length import StaticLengthTable
from segatt.model import ModelConfig, SegmentalModel

MAGIC = b"SEGATTCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


def _pack_record(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    enc = name.encode()
    head = struct.pack("<H", len(enc)) + enc + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def dumps(model: SegmentalModel, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None) -> bytes:
    header = {"config": model.config.to_dict(), "meta": meta or {}}
    records = [(n, p.data) for n, p in model.params.items()]
    if model.static_table is not None:
        header["static_delta_max"] = model.static_table.delta_max
        records.append(("static.mu", model.static_table.mu))
    records += sorted((extra or {}).items())
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + struct.pack("<I", len(records))
    body += b"".join(_pack_record(n, a) for n, a in records)
    return body + hashlib.sha256(body).digest()


def loads(blob: bytes) -> tuple[SegmentalModel, dict, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 32 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<II", body, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 8
    header = json.loads(body[pos:pos + hlen].decode())
    pos += hlen
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nl].decode()
        pos += nl
        (ndim,) = struct.unpack_from("<B", body, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    config = ModelConfig.from_dict(header["config"])
    params = {}
    for name, shape, _ in SegmentalModel.parameter_shapes(config):
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if arrays[name].shape != shape:
            raise CheckpointError(f"{name}: stored shape {arrays[name].shape} != expected {shape}")
        params[name] = Parameter(name, arrays.pop(name))
    static = None
    if "static.mu" in arrays:
        static = StaticLengthTable(arrays.pop("static.mu"), header["static_delta_max"])
    return SegmentalModel(config, params, static), header["meta"], arrays


def save(path: str | Path, model: SegmentalModel, meta: dict | None = None,
         extra: dict[str, np.ndarray] | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(model, meta, extra))
    tmp.replace(path)


def load(path: str | Path) -> tuple[SegmentalModel, dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def load_model(path: str | Path) -> SegmentalModel:
    return load(path)[0]
