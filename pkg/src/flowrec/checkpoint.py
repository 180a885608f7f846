"""Versioned binary container for named tensors plus a JSON header.

Layout (little-endian):
  magic ``FRTENS01`` | u32 header length | header JSON (UTF-8)
  | u32 tensor count | per tensor: u16 name length, name, u8 dtype code
  (0 = float32, 1 = float64), u8 ndim, u32 * ndim shape, raw data.

Model checkpoints store parameters as float32; the serving rep store uses
the same container with float64 payloads so precomputed representations are
bit-identical to freshly encoded ones. A checkpoint's ``version_tag`` is
the SHA-256 of its header (minus the tag itself) and tensor bytes, so any
artifact built from it can be matched to exactly that parameter snapshot.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import ConfigError
from .model import ModelConfig, ModelParams

MAGIC = b"FRTENS01"
FORMAT_VERSION = 1
_DTYPES = {0: "<f4", 1: "<f8"}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def _tensor_bytes(name: str, array: np.ndarray) -> bytes:
    code = _DTYPE_CODES.get(array.dtype)
    if code is None:
        raise ConfigError(f"tensor {name!r} has unsupported dtype {array.dtype}")
    raw = name.encode("utf-8")
    parts = [struct.pack("<H", len(raw)), raw, struct.pack("<BB", code, array.ndim)]
    parts.extend(struct.pack("<I", dim) for dim in array.shape)
    parts.append(np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def content_digest(header: dict, tensors: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(header, sort_keys=True).encode("utf-8"))
    for name in sorted(tensors):
        digest.update(_tensor_bytes(name, tensors[name]))
    return digest.hexdigest()


def write_tensor_file(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    header_raw = json.dumps(header, ensure_ascii=False).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_raw)))
        fh.write(header_raw)
        fh.write(struct.pack("<I", len(tensors)))
        for name, array in tensors.items():
            fh.write(_tensor_bytes(name, array))


def read_tensor_file(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ConfigError(f"{path} is not a tensor container (bad magic)")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            if code not in _DTYPES:
                raise ConfigError(f"tensor {name!r} has unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            width = int(_DTYPES[code][-1])
            data = np.frombuffer(fh.read(width * size), dtype=_DTYPES[code]).astype(np.float64)
            tensors[name] = data.reshape(shape)
    return header, tensors


def checkpoint_header(params: ModelParams) -> dict:
    return {
        "kind": "checkpoint",
        "format_version": FORMAT_VERSION,
        "config": params.config.to_dict(),
        "vocabs": params.vocabs,
        "dims": {
            "article_dim": params.config.article_dim,
            "user_dim": params.config.user_dim,
        },
    }


def _as_float32(tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: np.ascontiguousarray(t, dtype=np.float32) for name, t in tensors.items()}


def ensure_version_tag(params: ModelParams) -> str:
    """Stamp (if needed) the tag this snapshot would carry on disk."""
    if not params.version_tag:
        params.version_tag = content_digest(checkpoint_header(params), _as_float32(params.tensors))
    return params.version_tag


def save_checkpoint(path, params: ModelParams) -> str:
    """Write a float32 checkpoint; returns (and stamps) its version tag.

    Reloading a checkpoint rounds parameters to float32, so callers that
    need bit-parity with downstream artifacts should reload after saving.
    """
    header = checkpoint_header(params)
    stored = _as_float32(params.tensors)
    tag = content_digest(header, stored)
    header["version_tag"] = tag
    params.version_tag = tag
    write_tensor_file(path, header, stored)
    return tag


def load_checkpoint(path) -> ModelParams:
    header, tensors = read_tensor_file(path)
    if header.get("kind") != "checkpoint":
        raise ConfigError(f"{path} is not a model checkpoint")
    if header.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version {header.get('format_version')}")
    config = ModelConfig.from_dict(header["config"])
    vocabs = {a: {tok: int(i) for tok, i in v.items()} for a, v in header["vocabs"].items()}
    params = ModelParams(config=config, vocabs=vocabs, tensors=tensors,
                         version_tag=header.get("version_tag", ""))
    params.validate_shapes()
    return params
