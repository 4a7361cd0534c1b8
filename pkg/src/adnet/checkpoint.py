"""Binary checkpoint container.

Layout (little-endian)::

    b"ADNT"  u32 version  u32 header_len  header_json
    u32 array_count
    per array: u16 name_len  name  u8 rank  u32 extent * rank  float32 data

The JSON header holds the model config, the training config snapshot, the
step counter and free-form metadata. Arrays hold the parameters
(``param/``) and the Adam moments (``adam_m/``, ``adam_v/``).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from .model import ModelConfig
from .optim import AdamState

MAGIC = b"ADNT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Dict[str, np.ndarray]
    train_config: Dict[str, Any] = field(default_factory=dict)
    adam: AdamState = field(default_factory=AdamState)
    step: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)


def _header(ckpt: Checkpoint) -> bytes:
    doc = {
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "step": int(ckpt.step),
        "adam_step": int(ckpt.adam.step),
        "meta": ckpt.meta,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _arrays(ckpt: Checkpoint):
    yield from (("param/" + k, v) for k, v in ckpt.params.items())
    yield from (("adam_m/" + k, v) for k, v in ckpt.adam.m.items())
    yield from (("adam_v/" + k, v) for k, v in ckpt.adam.v.items())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = _header(ckpt)
    arrays = list(_arrays(ckpt))
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if arr.ndim > 255 or len(raw) > 0xFFFF:
            raise CheckpointError(f"cannot store array {name!r}")
        parts.append(struct.pack(f"<H{len(raw)}sB{arr.ndim}I", len(raw), raw, arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"checkpoint ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4:
        raise TruncatedCheckpointError("file shorter than the magic number")
    if r.take(4) != MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {buf[:4]!r})")
    version, hlen = r.unpack("II")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    try:
        doc = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    (count,) = r.unpack("I")
    params: Dict[str, np.ndarray] = {}
    adam = AdamState(step=int(doc["adam_step"]))
    for _ in range(count):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("B")
        shape = r.unpack(f"{rank}I")
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        kind, _, key = name.partition("/")
        target = {"param": params, "adam_m": adam.m, "adam_v": adam.v}.get(kind)
        if target is None:
            raise CheckpointError(f"unknown array group in {name!r}")
        target[key] = arr
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last array")
    return Checkpoint(
        model_config=ModelConfig(**doc["model_config"]),
        params=params,
        train_config=doc["train_config"],
        adam=adam,
        step=int(doc["step"]),
        meta=doc["meta"],
    )


def save_checkpoint(path, ckpt: Checkpoint):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def checkpoint_from_model(model, train_config: Optional[Dict[str, Any]] = None, adam: Optional[AdamState] = None,
                          step: int = 0, meta: Optional[Dict[str, Any]] = None) -> Checkpoint:
    params = {k: np.array(v, dtype=np.float32) for k, v in model.weights.arrays().items()}
    return Checkpoint(model.config, params, train_config or {}, adam or AdamState(), step, meta or {})
