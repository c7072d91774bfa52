"""Checkpoint serialization.

Binary layout (all little-endian):
  magic   8 bytes  b"HYDRALAB"
  version u32      format version (currently 1)
  meta    u32 len + UTF-8 JSON: {"kind": ..., "config": {...}}
  count   u32      number of parameter records
  record  u32 name len + UTF-8 name
          u32 ndim + ndim * i64 dims
          raw float64 data, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, build_hydra, build_transformer
from .tensor import UsageError

MAGIC = b"HYDRALAB"
VERSION = 1


def save_checkpoint(path, kind: str, config: ModelConfig, named_params) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps({"kind": kind, "config": config.to_dict()}).encode("utf-8")
    named_params = list(named_params)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", len(named_params)))
        for name, p in named_params:
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            dims = p.data.shape
            f.write(struct.pack("<I", len(dims)))
            for dim in dims:
                f.write(struct.pack("<q", dim))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (kind, ModelConfig, {name: ndarray})."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        if f.read(8) != MAGIC:
            raise UsageError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise UsageError(f"unsupported checkpoint version {version}")
        (mlen,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(mlen).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{ndim}q", f.read(8 * ndim)) if ndim else ()
            n = int(np.prod(dims)) if dims else 1
            arrays[name] = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(dims).copy()
    return meta["kind"], ModelConfig.from_dict(meta["config"]), arrays


def restore_model(path):
    """Rebuild a model from a checkpoint: (kind, config, params)."""
    kind, config, arrays = load_checkpoint(path)
    params = build_hydra(config) if kind == "hydra" else build_transformer(config)
    named = dict(params.parameters())
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise UsageError(f"checkpoint mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
    for name, arr in arrays.items():
        if named[name].data.shape != arr.shape:
            raise UsageError(f"shape mismatch for {name}")
        named[name].data[...] = arr
    return kind, config, params
