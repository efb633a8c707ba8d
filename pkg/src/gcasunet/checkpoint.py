"""Versioned binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"GCASUNET"
    version      u8
    config_len   u32, then config_len bytes of canonical ModelConfig text (UTF-8)
    n_records    u32
    record*      name_len u16, name (UTF-8), ndim u8, dims u32 * ndim,
                 values float32 * prod(dims)
    checksum     32 bytes, SHA-256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import os
import struct
from typing import Dict, Tuple, Union

import numpy as np
import torch

from .model import GCASUNet, ModelConfig

MAGIC = b"GCASUNET"
FORMAT_VERSION = 1
_DIGEST = 32

PathLike = Union[str, os.PathLike]


class CheckpointError(Exception):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Checkpoint parameters do not fit the model built from its config."""


def encode_checkpoint(params: Dict[str, torch.Tensor], cfg: ModelConfig) -> bytes:
    text = cfg.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<B", FORMAT_VERSION), struct.pack("<I", len(text)), text]
    parts.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> Tuple[Dict[str, torch.Tensor], ModelConfig]:
    if len(blob) < len(MAGIC) + 1 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = blob[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    if len(blob) < len(MAGIC) + 1 + _DIGEST:
        raise ChecksumError("checkpoint truncated")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch (file truncated or corrupted)")

    pos = len(MAGIC) + 1

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise ChecksumError("checkpoint body shorter than its records declare")
        chunk = body[pos:pos + n]
        pos += n
        return chunk

    (cfg_len,) = struct.unpack("<I", take(4))
    cfg = ModelConfig.from_text(take(cfg_len).decode("utf-8"))
    (n,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(n):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        params[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(body):
        raise CheckpointError("trailing bytes after parameter records")
    return params, cfg


def save_checkpoint(model_or_params, cfg: ModelConfig, path: PathLike) -> None:
    params = model_or_params.state_dict() if isinstance(model_or_params, torch.nn.Module) else model_or_params
    blob = encode_checkpoint(params, cfg)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, torch.Tensor], ModelConfig]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def load_model(path: PathLike) -> GCASUNet:
    params, cfg = load_checkpoint(path)
    model = GCASUNet(cfg)
    expected = model.state_dict()
    bad = sorted(set(expected) ^ set(params))
    bad += [k for k in expected if k in params and tuple(expected[k].shape) != tuple(params[k].shape)]
    if bad:
        raise CheckpointMismatchError(f"checkpoint does not match its config: {', '.join(bad[:5])}")
    model.load_state_dict(params)
    model.eval()
    return model
