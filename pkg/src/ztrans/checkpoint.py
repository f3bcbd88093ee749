"""Binary checkpoint format.

Layout::

    b"ZTRX" | version: u16 LE | header_len: u32 LE | header: UTF-8 JSON | payload

The header lists ``{"name", "shape", "offset"}`` per tensor (offset in bytes
from the start of the payload) and may carry ``config`` and ``meta``
objects.  The payload is the concatenation of little-endian float64 arrays.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .errors import FormatError
from .model import ModelParams, TransformerConfig, check_params

MAGIC = b"ZTRX"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def save_checkpoint(params: Mapping[str, Tensor], path: str | os.PathLike,
                    config: TransformerConfig | None = None, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {"tensors": entries, "payload_bytes": offset}
    if config is not None:
        header["config"] = config.to_dict()
    if meta is not None:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> tuple[ModelParams, dict]:
    """Parameters plus the decoded JSON header."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: truncated before header")
    magic, version, hlen = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    payload = memoryview(raw)[start:]
    if len(payload) != header.get("payload_bytes", -1):
        raise FormatError(f"{path}: payload is {len(payload)} bytes, header says "
                          f"{header.get('payload_bytes')}")
    params = ModelParams()
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = entry["offset"]
        hi = lo + 8 * count
        if hi > len(payload):
            raise FormatError(f"{path}: tensor {entry['name']} runs past end of payload")
        arr = np.frombuffer(payload[lo:hi], dtype="<f8").astype(np.float64).reshape(shape)
        params[entry["name"]] = Tensor(arr, requires_grad=True)
    return params, header


def load_checkpoint(path: str | os.PathLike, config: TransformerConfig | None = None) -> ModelParams:
    """Load parameters; with ``config``, verify names and shapes against it."""
    params, header = read_checkpoint(path)
    if config is None and "config" in header:
        config = TransformerConfig.from_dict(header["config"])
    if config is not None:
        check_params(params, config)
    return params


def load_model(path: str | os.PathLike) -> tuple[ModelParams, TransformerConfig, dict]:
    params, header = read_checkpoint(path)
    if "config" not in header:
        raise FormatError(f"{path}: checkpoint carries no model config")
    config = TransformerConfig.from_dict(header["config"])
    check_params(params, config)
    return params, config, header.get("meta", {})
