"""Binary model checkpoints.

Layout (all integers little-endian):

  magic        8 bytes  b"HMNCKPT\\x01"
  version      uint32   currently 1
  header_len   uint32
  header       UTF-8 JSON: {"arch": {...}, "dtype": "float32"|"float64",
               "meta": {...}} with sorted keys, compact separators
  n_params     uint32
  records      per parameter, in registry order:
                 name_len  uint16, name UTF-8
                 dtype     uint8 (0 = float32, 1 = float64)
                 ndim      uint8
                 shape     uint32 * ndim
                 payload   raw little-endian row-major values

Save -> load -> save is byte-identical, and a loaded model reproduces the
original's forward outputs exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import ArchConfig, Model, build_model

MAGIC = b"HMNCKPT\x01"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(Exception):
    """Checkpoint file is missing, corrupt or incompatible."""


def save_checkpoint(path, model: Model, meta: dict | None = None) -> Path:
    path = Path(path)
    arch = asdict(model.arch.resolved())
    arch["encoder_channels"] = list(arch["encoder_channels"])
    arch["decoder_channels"] = list(arch["decoder_channels"])
    header = json.dumps(
        {"arch": arch, "dtype": model.dtype.name, "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")

    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header,
              struct.pack("<I", len(model.params))]
    for name, p in model.params.items():
        data = p.data
        code = _DTYPE_CODES.get(data.dtype)
        if code is None:
            raise CheckpointError(f"parameter {name!r} has unsupported dtype {data.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype=_CODE_DTYPES[code]).tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[Model, dict]:
    """Rebuild the model and return (model, meta)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a model checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (header_len,) = r.unpack("<I")
    try:
        header = json.loads(r.take(header_len).decode("utf-8"))
        arch_fields = dict(header["arch"])
        arch_fields["encoder_channels"] = tuple(arch_fields["encoder_channels"])
        arch_fields["decoder_channels"] = tuple(arch_fields["decoder_channels"])
        arch = ArchConfig(**arch_fields)
        dtype = np.dtype(header["dtype"])
        meta = header.get("meta", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad checkpoint header in {path}: {exc}") from exc

    model = build_model(arch, seed=0, dtype=dtype)
    (n_params,) = r.unpack("<I")
    if n_params != len(model.params):
        raise CheckpointError(
            f"checkpoint has {n_params} parameters, architecture defines {len(model.params)}"
        )
    for _ in range(n_params):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for parameter {name!r}")
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        payload = r.take(count * _CODE_DTYPES[code].itemsize)
        values = np.frombuffer(payload, dtype=_CODE_DTYPES[code]).reshape(shape)
        if name not in model.params:
            raise CheckpointError(f"checkpoint parameter {name!r} unknown to architecture")
        try:
            model.set_parameter_data(name, values.astype(dtype))
        except ValueError as exc:
            raise CheckpointError(str(exc)) from exc
    if r.pos != len(r.blob):
        raise CheckpointError(f"{len(r.blob) - r.pos} trailing bytes in {path}")
    return model, meta
