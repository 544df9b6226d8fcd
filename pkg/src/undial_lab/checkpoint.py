"""Binary checkpoint format.

Layout::

    b"UNDL" | version (1 byte) | header length (uint32 LE) | JSON header | data

The JSON header carries the model config, its architecture hash, one entry
per parameter (name, shape, byte offset into the data section, byte length),
a SHA-256 checksum of the data section, free-form flags (``memo`` marks a
model fine-tuned on a forget set) and metadata.  The data section is the
concatenation of little-endian float32 buffers in parameter order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IncompatibleCheckpointError, InvalidArgumentError
from .model import LmConfig, TinyLM
from .tensor import Tensor

MAGIC = b"UNDL"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def to_bytes(model: TinyLM, flags: dict | None = None, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, p in model.params.items():
        buf = np.ascontiguousarray(p.data, dtype=_LE_F32).tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    data = b"".join(chunks)
    header = {
        "config": model.config.to_dict(),
        "config_hash": model.config.arch_hash(),
        "params": entries,
        "checksum": "sha256:" + hashlib.sha256(data).hexdigest(),
        "flags": dict(flags or {}),
        "meta": {**model.meta, **(meta or {})},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + bytes([VERSION]) + struct.pack("<I", len(hbytes)) + hbytes + data


def from_bytes(blob: bytes) -> tuple[TinyLM, dict]:
    if blob[:4] != MAGIC:
        raise InvalidArgumentError("not an UNDL checkpoint (bad magic)")
    if blob[4] != VERSION:
        raise InvalidArgumentError(f"unsupported checkpoint version {blob[4]}")
    (hlen,) = struct.unpack("<I", blob[5:9])
    header = json.loads(blob[9:9 + hlen].decode("utf-8"))
    data = blob[9 + hlen:]
    digest = "sha256:" + hashlib.sha256(data).hexdigest()
    if digest != header["checksum"]:
        raise IncompatibleCheckpointError("checkpoint data checksum mismatch")
    cfg = LmConfig.from_dict(header["config"])
    if cfg.arch_hash() != header["config_hash"]:
        raise IncompatibleCheckpointError("config hash does not match the stored config")
    params = {}
    for e in header["params"]:
        arr = np.frombuffer(data, dtype=_LE_F32, count=e["nbytes"] // 4, offset=e["offset"])
        params[e["name"]] = Tensor(arr.reshape(e["shape"]).astype(np.float32), requires_grad=True,
                                   name=e["name"])
    model = TinyLM(cfg, params, meta=header.get("meta"))
    return model, header


def save_checkpoint(model: TinyLM, path: str | Path, flags: dict | None = None,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(model, flags=flags, meta=meta))
    return path


def load_checkpoint(path: str | Path) -> TinyLM:
    return from_bytes(Path(path).read_bytes())[0]


def read_header(path: str | Path) -> dict:
    return from_bytes(Path(path).read_bytes())[1]


def require_compatible(*models: TinyLM) -> None:
    """Raise :class:`IncompatibleCheckpointError` unless all architectures match."""
    for m in models[1:]:
        models[0].check_compatible(m)
