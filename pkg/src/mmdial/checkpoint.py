"""Versioned binary checkpoint container.

Layout: an 8-byte magic, a little-endian u32 format version, a
little-endian u64 header length, a UTF-8 JSON header, then the raw
tensor payload.  The header carries the model config, the training
step, the generator state, a small extra blob, and an index of tensor
records (name, shape, dtype, byte offset).  Floats are stored
little-endian exactly as held in memory, so a save/load round trip is
bit-exact and a reloaded model continues training on the identical
trajectory.

Writes go through a temp file and an atomic rename so a crash mid-save
never clobbers the previous good checkpoint.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .model import Model, ModelConfig

MAGIC = b"MMDIALCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config: dict
    step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)


# optimizer state shares the container under this namespace so model
# tensor names can be validated strictly against the rebuilt model
_OPT_PREFIX = "opt:"


def _le_dtype(arr: np.ndarray) -> str:
    kind = arr.dtype.newbyteorder("<")
    if kind.kind != "f":
        raise DataError(f"only float tensors are checkpointed, got {arr.dtype}")
    return kind.str


def save_checkpoint(path, tensors, config: dict, step: int = 0,
                    rng: np.random.Generator | None = None,
                    extra: dict | None = None) -> None:
    """Write named arrays plus header metadata to `path` atomically."""
    index = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value.data if hasattr(value, "data") else value)
        dtype = _le_dtype(arr)
        raw = arr.astype(dtype, copy=False).tobytes()
        index.append({"name": name, "shape": list(arr.shape),
                      "dtype": dtype, "offset": offset})
        chunks.append(raw)
        offset += len(raw)

    header = json.dumps({
        "config": config,
        "step": step,
        "rng_state": None if rng is None else rng.bit_generator.state,
        "extra": extra or {},
        "tensors": index,
    }).encode("utf-8")

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<IQ", blob, 8)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    body = 8 + struct.calcsize("<IQ")
    try:
        header = json.loads(blob[body:body + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: corrupt checkpoint header ({e})") from None

    payload = blob[body + header_len:]
    tensors = {}
    for rec in header["tensors"]:
        arr_dtype = np.dtype(rec["dtype"])
        nbytes = int(np.prod(rec["shape"], dtype=np.int64)) * arr_dtype.itemsize
        raw = payload[rec["offset"]:rec["offset"] + nbytes]
        if len(raw) != nbytes:
            raise DataError(f"{path}: truncated payload for tensor {rec['name']!r}")
        tensors[rec["name"]] = (
            np.frombuffer(raw, dtype=arr_dtype).reshape(rec["shape"]).copy())
    return Checkpoint(tensors=tensors, config=header["config"], step=header["step"],
                      rng_state=header["rng_state"], extra=header["extra"])


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def save_model(path, model: Model, step: int = 0,
               rng: np.random.Generator | None = None,
               extra: dict | None = None,
               optimizer: dict[str, np.ndarray] | None = None) -> None:
    tensors = dict(model.named_tensors())
    for name, arr in (optimizer or {}).items():
        tensors[_OPT_PREFIX + name] = arr
    save_checkpoint(path, tensors, model.config.to_dict(),
                    step=step, rng=rng, extra=extra)


def load_model(path) -> tuple[Model, Checkpoint]:
    """Rebuild a model from a checkpoint, verifying the tensor index."""
    ckpt = load_checkpoint(path)
    ckpt.optimizer = {k[len(_OPT_PREFIX):]: v for k, v in ckpt.tensors.items()
                      if k.startswith(_OPT_PREFIX)}
    ckpt.tensors = {k: v for k, v in ckpt.tensors.items()
                    if not k.startswith(_OPT_PREFIX)}
    model = Model.init(ModelConfig(**ckpt.config), seed=0)
    named = model.named_tensors()
    missing = sorted(named.keys() - ckpt.tensors.keys())
    unexpected = sorted(ckpt.tensors.keys() - named.keys())
    if missing or unexpected:
        raise DataError(
            f"{path}: tensor index mismatch (missing {missing}, unexpected {unexpected})")
    for name, tensor in named.items():
        stored = ckpt.tensors[name]
        if stored.shape != tensor.data.shape:
            raise DataError(
                f"{path}: tensor {name!r} has shape {stored.shape}, "
                f"model expects {tensor.data.shape}")
        tensor.data[...] = stored
    return model, ckpt
