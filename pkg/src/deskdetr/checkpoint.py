"""Checkpoint files: a versioned JSON manifest followed by raw little-endian float32 blobs.

Layout::

    MAGIC (8 bytes) | manifest length (u32 LE) | manifest (UTF-8 JSON) | blobs

Each manifest tensor entry records its group (``param`` or ``ema``), shape,
byte offset into the blob section, byte length and SHA-256, so truncation
and bit rot are both detected on load.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, IntegrityError, StorageError
from .model import RTDETR, ModelConfig

MAGIC = b"DSKDETR\x00"
FORMAT_VERSION = 1
GROUPS = ("param", "ema")
_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    step: int = 0
    deploy: bool = False
    params: dict[str, np.ndarray] = field(default_factory=dict)
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict = field(default_factory=dict)  # effective run configuration, echoed verbatim

    def build_model(self, use_ema: bool = False) -> RTDETR:
        """Instantiate the model (folded when saved in deploy mode) and load its weights."""
        model = RTDETR(self.model_config)
        if self.deploy:
            model.reparameterize()
        state = self.ema if use_ema and self.ema else self.params
        model.load_state_dict(state)
        model.eval()
        return model


def checkpoint_from(model: RTDETR, ema: dict[str, np.ndarray] | None = None, step: int = 0,
                    config: dict | None = None) -> Checkpoint:
    return Checkpoint(model.cfg, step, model.deployed, model.state_dict(), dict(ema or {}), dict(config or {}))


def _blob(arr: np.ndarray, name: str) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype != np.float32:
        raise ConfigError(f"tensor {name} has dtype {arr.dtype}; checkpoints store float32 only")
    return np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    """Write ``ckpt`` atomically (temporary file, then rename)."""
    entries, blobs, offset = [], [], 0
    for group, tensors in (("param", ckpt.params), ("ema", ckpt.ema)):
        for name in sorted(tensors):
            data = _blob(tensors[name], name)
            entries.append({"name": name, "group": group, "shape": list(np.shape(tensors[name])),
                            "dtype": "<f4", "offset": offset, "nbytes": len(data),
                            "sha256": hashlib.sha256(data).hexdigest()})
            blobs.append(data)
            offset += len(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "config": ckpt.config,
        "step": int(ckpt.step),
        "deploy": bool(ckpt.deploy),
        "tensors": entries,
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            for data in blobs:
                fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc


def read_manifest(raw: bytes) -> tuple[dict, int]:
    """Parse the header; returns the manifest and the blob-section start offset."""
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic)")
    (length,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    if start + length > len(raw):
        raise IntegrityError("truncated checkpoint manifest")
    try:
        manifest = json.loads(raw[start:start + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"corrupt checkpoint manifest: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise IntegrityError(f"unsupported checkpoint format version {version!r} (expected {FORMAT_VERSION})")
    return manifest, start + length


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    manifest, base = read_manifest(raw)
    groups: dict[str, dict[str, np.ndarray]] = {g: {} for g in GROUPS}
    for entry in manifest["tensors"]:
        name, group = entry["name"], entry["group"]
        if group not in groups or entry["dtype"] != "<f4":
            raise IntegrityError(f"bad manifest entry for {name}")
        lo, n = base + entry["offset"], entry["nbytes"]
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if n != count * _DTYPE.itemsize or lo + n > len(raw):
            raise IntegrityError(f"blob {group}/{name} is truncated or has the wrong length")
        data = raw[lo:lo + n]
        if hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise IntegrityError(f"checksum mismatch for {group}/{name}")
        groups[group][name] = np.frombuffer(data, dtype=_DTYPE).reshape(entry["shape"]).astype(np.float32)
    return Checkpoint(ModelConfig.from_dict(manifest["model_config"]), manifest["step"], manifest["deploy"],
                      groups["param"], groups["ema"], manifest.get("config", {}))
