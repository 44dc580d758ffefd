"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    magic        4 bytes  b"DPRC"
    version      u32
    precision    1 byte   b"d" (float64) or b"f" (float32)
    digest       32 bytes sha256 of the canonical model config
    config_len   u32, followed by the model config as UTF-8 JSON
    extras_len   u32, followed by extra metadata as UTF-8 JSON
    n_entries    u32
    entries      n_entries x (u16 name_len, name, u8 ndim, ndim x u32 dims, u64 offset)
    payload      row-major little-endian IEEE-754 arrays; offsets are relative
                 to the payload start
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import DprNetModel, ModelConfig
from .config import config_digest
from .errors import CheckpointError

MAGIC = b"DPRC"
FORMAT_VERSION = 1
_PRECISION_TAGS = {"double": (b"d", np.dtype("<f8")), "single": (b"f", np.dtype("<f4"))}
_TAG_TO_PRECISION = {tag: name for name, (tag, _) in _PRECISION_TAGS.items()}


class ConfigDigestWarning(UserWarning):
    pass


@dataclass
class Checkpoint:
    model: DprNetModel
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


def save_checkpoint(
    path: str | Path,
    model: DprNetModel,
    arrays: dict[str, np.ndarray] | None = None,
    extras: dict | None = None,
) -> None:
    """Write ``model`` plus optional named ``arrays`` (e.g. scaler statistics)."""
    cfg = model.config
    tag, dtype = _PRECISION_TAGS[cfg.precision]
    tensors = dict(model.state_dict())
    for name, value in (arrays or {}).items():
        if name in tensors:
            raise CheckpointError(f"extra array {name!r} collides with a parameter name")
        tensors[name] = np.asarray(value)

    config_bytes = json.dumps(cfg.to_dict(), sort_keys=True, default=list).encode("utf-8")
    extras_bytes = json.dumps(extras or {}, sort_keys=True).encode("utf-8")

    manifest = bytearray()
    payload = bytearray()
    for name, value in tensors.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(value, dtype=dtype, order="C")
        manifest += struct.pack("<H", len(encoded)) + encoded
        manifest += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        manifest += struct.pack("<Q", len(payload))
        payload += arr.tobytes()

    header = MAGIC + struct.pack("<I", FORMAT_VERSION) + tag + config_digest(cfg)
    header += struct.pack("<I", len(config_bytes)) + config_bytes
    header += struct.pack("<I", len(extras_bytes)) + extras_bytes
    header += struct.pack("<I", len(tensors))
    Path(path).write_bytes(bytes(header + manifest + payload))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint truncated")
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a DPRC checkpoint")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    tag = r.take(1)
    if tag not in _TAG_TO_PRECISION:
        raise CheckpointError(f"{path}: unknown precision tag {tag!r}")
    digest = r.take(32)
    (n,) = r.unpack("<I")
    try:
        config_dict = json.loads(r.take(n).decode("utf-8"))
        (n,) = r.unpack("<I")
        extras = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header") from exc
    config_dict["kernels"] = tuple(config_dict["kernels"])
    config = ModelConfig(**config_dict)
    if config_digest(config) != digest:
        warnings.warn(f"{path}: stored config digest does not match stored config", ConfigDigestWarning)
    if expected is not None and config_digest(expected) != digest:
        warnings.warn(f"{path}: checkpoint config differs from the requested config", ConfigDigestWarning)

    _, dtype = _PRECISION_TAGS[_TAG_TO_PRECISION[tag]]
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (offset,) = r.unpack("<Q")
        entries.append((name, tuple(shape), offset))
    payload = r.blob[r.pos :]
    arrays = {}
    for name, shape, offset in entries:
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {name}")
        arrays[name] = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape)

    model = DprNetModel(config, seed=0)
    params = set(model.named_parameters())
    model.load_state_dict({k: v for k, v in arrays.items() if k in params})
    extra_arrays = {k: v.astype(np.float64) for k, v in arrays.items() if k not in params}
    return Checkpoint(model, extra_arrays, extras)
