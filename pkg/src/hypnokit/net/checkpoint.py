"""Versioned checkpoint container and ensemble manifests.

Layout::

    b"HYPNOCKP"                    8-byte magic
    uint32 little-endian           header length in bytes
    header                         UTF-8 JSON
    payload                        little-endian float32 arrays, back to back

The header lists every array as ``{"name", "shape", "offset"}`` with
``offset`` counted in float32 elements. Unknown header keys are ignored.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .model import ModelConfig, USleep

MAGIC = b"HYPNOCKP"
FORMAT_VERSION = 1
SOURCE_TAGS = ("pretrained", "generalized", "site_specific", "scratch")
MANIFEST_FORMAT = "hypnokit-ensemble"


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: USleep, **meta) -> "Checkpoint":
        arrays = {k: np.array(v, dtype=np.float32) for k, v in model.state().items()}
        return cls(model.config, arrays, dict(meta))

    def to_model(self, dtype=np.float32) -> USleep:
        model = USleep(self.config, seed=0, dtype=dtype)
        model.load_state(self.arrays)
        return model


def save_checkpoint(ckpt: Checkpoint | USleep, path, **meta) -> Path:
    if isinstance(ckpt, USleep):
        ckpt = Checkpoint.from_model(ckpt, **meta)
    entries = []
    offset = 0
    chunks = []
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.config.to_dict(),
        "arrays": entries,
        "payload_floats": offset,
        "meta": ckpt.meta,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for c in chunks:
            fh.write(c)
    return path


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a hypnokit checkpoint")
    (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    if len(data) < start + hlen:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version!r}, expected {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(header["model_config"])
        entries = header["arrays"]
        n_floats = int(header["payload_floats"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete header ({exc})") from exc
    payload = data[start + hlen :]
    if len(payload) != 4 * n_floats:
        raise FormatError(f"{path}: payload holds {len(payload)} bytes, header promises {4 * n_floats}")
    flat = np.frombuffer(payload, dtype="<f4")
    arrays = {}
    for e in entries:
        shape = tuple(e["shape"])
        size = int(np.prod(shape, dtype=np.int64))
        off = int(e["offset"])
        if off < 0 or off + size > flat.size:
            raise FormatError(f"{path}: array {e['name']!r} lies outside the payload")
        arrays[e["name"]] = flat[off : off + size].reshape(shape).astype(np.float32)
    return Checkpoint(config, arrays, header.get("meta", {}))


def load_model(path, dtype=np.float32) -> USleep:
    return load_checkpoint(path).to_model(dtype)


def write_manifest(members, path, **meta) -> Path:
    """Ensemble manifest: member checkpoint paths relative to the manifest."""
    path = Path(path)
    rel = [os.path.relpath(Path(m).resolve(), path.parent.resolve()) for m in members]
    path.write_text(json.dumps({"format": MANIFEST_FORMAT, "version": 1, "members": rel, "meta": meta},
                               indent=2, sort_keys=True))
    return path


def is_manifest(path) -> bool:
    path = Path(path)
    if path.suffix.lower() != ".json":
        return False
    try:
        return json.loads(path.read_text()).get("format") == MANIFEST_FORMAT
    except (OSError, ValueError, AttributeError):
        return False


def load_ensemble(path, dtype=np.float32) -> list[USleep]:
    """Models named by a manifest, or a one-element list for a checkpoint."""
    path = Path(path)
    if not is_manifest(path):
        return [load_model(path, dtype)]
    doc = json.loads(path.read_text())
    members = doc.get("members") or []
    if not members:
        raise FormatError(f"{path}: ensemble manifest lists no members")
    return [load_model(path.parent / m, dtype) for m in members]
