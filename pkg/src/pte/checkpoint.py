"""``PTE1`` checkpoints: magic, header length, JSON header, raw little-endian tensor data.

Layout::

    b"PTE1" | uint64 LE header length | UTF-8 JSON header | tensor bytes in header order

The header lists tensor names, shapes and the float dtype, the model
config, optional partition labels (run-length encoded) and free-form meta.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError, PipelineError
from .partition import ParamPartition
from .transformer import ModelConfig, TransformerModel

MAGIC = b"PTE1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    model: TransformerModel
    partition: Optional[ParamPartition] = None
    meta: dict = field(default_factory=dict)


def encode(model: TransformerModel, partition: Optional[ParamPartition] = None, meta: Optional[dict] = None) -> bytes:
    dtype = np.dtype(model.dtype).name
    if dtype not in _DTYPES:
        raise DataError(f"cannot checkpoint dtype {dtype}")
    tensors = [{"name": k, "shape": list(p.shape)} for k, p in model.params.items()]
    header = {
        "config": model.config.to_dict(),
        "dtype": dtype,
        "tensors": tensors,
        "value_splits": {k: list(v) for k, v in model.value_splits.items()},
        "partition": None if partition is None else partition.to_header(),
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(p.data, dtype=_DTYPES[dtype]).tobytes() for p in model.params.values())
    return MAGIC + struct.pack("<Q", len(head)) + head + body


def decode(blob: bytes) -> Checkpoint:
    if blob[:4] != MAGIC:
        raise DataError("not a PTE1 checkpoint")
    (n,) = struct.unpack("<Q", blob[4:12])
    header = json.loads(blob[12:12 + n].decode("utf-8"))
    config = ModelConfig.from_dict(header["config"])
    dt = np.dtype(_DTYPES[header["dtype"]])
    offset = 12 + n
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = offset + count * dt.itemsize
        if end > len(blob):
            raise DataError("truncated checkpoint")
        params[t["name"]] = np.frombuffer(blob, dtype=dt, count=count, offset=offset).reshape(t["shape"]) \
            .astype(header["dtype"])
        offset = end
    if offset != len(blob):
        raise DataError("trailing bytes after tensor data")
    splits = {k: tuple(v) for k, v in header["value_splits"].items()}
    model = TransformerModel(config, params, value_splits=splits)
    part = None if header["partition"] is None else ParamPartition.from_header(header["partition"], config)
    return Checkpoint(model, part, header["meta"])


def save(path: str, model: TransformerModel, partition: Optional[ParamPartition] = None,
         meta: Optional[dict] = None) -> str:
    """Write atomically; returns the SHA-256 of the file contents."""
    blob = encode(model, partition, meta)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise PipelineError(f"missing checkpoint {path}")
    with open(path, "rb") as fh:
        return decode(fh.read())


def file_digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
