"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GSD1" | u32 format_version | u32 header_len | header JSON (utf-8)
    | payload: float32 little-endian | u32 CRC-32 of payload

The header holds the model config and a manifest of ``[name, shape, offset]``
entries (offset in bytes into the payload).  Parameters come first, then each
batch-norm layer's running mean and variance as ``<layer>.running_mean`` /
``<layer>.running_var``.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .model import Model, ModelConfig, build_model

MAGIC = b"GSD1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ManifestEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * 4


@dataclass
class Checkpoint:
    config: ModelConfig
    manifest: list[ManifestEntry]
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def model_arrays(model: Model) -> list[tuple[str, np.ndarray]]:
    """Every persisted array of ``model`` in manifest order."""
    out = [(name, t.data) for name, t in model.named_tensors()]
    for name, st in model.named_bn_states():
        out.append((f"{name}.running_mean", st.mean))
        out.append((f"{name}.running_var", st.var))
    return out


def encode(model: Model, meta: dict | None = None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in model_arrays(model):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append([name, list(arr.shape), offset])
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    header = json.dumps({"config": model.config.to_dict(), "manifest": manifest, "meta": meta or {}},
                        sort_keys=True).encode("utf-8")
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    return b"".join([MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header, payload, struct.pack("<I", crc)])


def save_checkpoint(model: Model, path: str | os.PathLike, meta: dict | None = None) -> None:
    blob = encode(model, meta)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    start = 12 + hlen
    if start + 4 > len(blob):
        raise CheckpointError("truncated checkpoint")
    try:
        header = json.loads(blob[12:start].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        manifest = [ManifestEntry(str(n), tuple(int(d) for d in s), int(o)) for n, s, o in header["manifest"]]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    payload = blob[start:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise CheckpointError("checkpoint CRC mismatch: payload is corrupted")
    arrays, end = {}, 0
    for e in sorted(manifest, key=lambda e: e.offset):
        if e.offset < end or e.offset + e.nbytes > len(payload):
            raise CheckpointError(f"manifest entry {e.name!r} overlaps or is out of bounds")
        end = e.offset + e.nbytes
        arrays[e.name] = np.frombuffer(payload, dtype="<f4", count=e.nbytes // 4, offset=e.offset).reshape(e.shape)
    return Checkpoint(config, manifest, arrays, header.get("meta", {}), version)


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        return decode(f.read())


def load_into(model: Model, ckpt: Checkpoint) -> Model:
    """Copy checkpoint arrays into ``model``; rejects any layout mismatch,
    naming the first differing manifest entry."""
    expected = model_arrays(model)
    for k in range(max(len(expected), len(ckpt.manifest))):
        have = ckpt.manifest[k] if k < len(ckpt.manifest) else None
        want = expected[k] if k < len(expected) else None
        if have is None or want is None or have.name != want[0] or have.shape != want[1].shape:
            desc_have = f"{have.name} {have.shape}" if have else "<missing>"
            desc_want = f"{want[0]} {want[1].shape}" if want else "<missing>"
            raise CheckpointError(f"checkpoint does not match model at manifest entry {k}: "
                                  f"checkpoint has {desc_have}, model expects {desc_want}")
    for name, arr in expected:
        arr[...] = ckpt.arrays[name]
    return model


def load_checkpoint(path: str | os.PathLike, config: ModelConfig | None = None) -> Model:
    """Rebuild the model stored at ``path`` (or ``config``, which must match)."""
    ckpt = read_checkpoint(path)
    return load_into(build_model(config or ckpt.config), ckpt)
