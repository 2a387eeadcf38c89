"""Self-describing checkpoint archive (format ``ckpt-v1``).

A checkpoint is an uncompressed zip with fixed member order and timestamps:

``format``          the version string
``arrays.json``     one entry per array: path, shape, dtype, byte offset, byte count
``arrays.bin``      the arrays as little-endian float32, concatenated
``config.json``     model / ssl / train configs and schedule state
``provenance.json`` phase history, seeds, data digests, tool version

Array paths are grouped by prefix: ``model/`` (backbone and head), ``ssl/``
(objective heads, decoder, teacher/momentum encoder, centre), ``opt/``
(AdamW moments).
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = "ckpt-v1"
_EPOCH = (1980, 1, 1, 0, 0, 0)
_MEMBERS = ("format", "arrays.json", "arrays.bin", "config.json", "provenance.json")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    version: str = FORMAT_VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix.rstrip("/") + "/"
        return {k[len(p):]: v for k, v in self.arrays.items() if k.startswith(p)}

    def tensors(self, prefix: str, dtype=torch.float32) -> dict[str, torch.Tensor]:
        return {k: torch.from_numpy(v.copy()).to(dtype) for k, v in self.group(prefix).items()}

    @property
    def has_head(self) -> bool:
        return "model/head.weight" in self.arrays

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for name in sorted(self.arrays):
            a = np.ascontiguousarray(self.arrays[name], dtype="<f4")
            raw = a.tobytes()
            entries.append({"path": name, "shape": list(a.shape), "dtype": "<f4",
                            "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        payload = {
            "format": self.version.encode(),
            "arrays.json": _dump(entries),
            "arrays.bin": b"".join(blobs),
            "config.json": _dump(self.config),
            "provenance.json": _dump(self.provenance),
        }
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
            for name in _MEMBERS:
                info = zipfile.ZipInfo(name, date_time=_EPOCH)
                info.external_attr = 0o644 << 16
                zf.writestr(info, payload[name])
        return buf.getvalue()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        try:
            zf = zipfile.ZipFile(io.BytesIO(data))
        except zipfile.BadZipFile as exc:
            raise CheckpointError(f"not a checkpoint archive: {exc}") from None
        with zf:
            names = set(zf.namelist())
            if "format" not in names:
                raise CheckpointError("archive has no format member")
            version = zf.read("format").decode()
            if version != FORMAT_VERSION:
                raise CheckpointVersionError(
                    f"checkpoint format {version!r} is not supported (expected {FORMAT_VERSION!r})"
                )
            missing = [m for m in _MEMBERS if m not in names]
            if missing:
                raise CheckpointError(f"archive lacks {missing}")
            entries = json.loads(zf.read("arrays.json"))
            blob = zf.read("arrays.bin")
            arrays = {}
            for e in entries:
                raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
                arrays[e["path"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
            return cls(arrays, json.loads(zf.read("config.json")),
                       json.loads(zf.read("provenance.json")), version)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def _dump(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def to_arrays(prefix: str, named) -> dict[str, np.ndarray]:
    """``{prefix/name: float32 array}`` from a mapping or iterable of named tensors."""
    items = named.items() if hasattr(named, "items") else named
    return {f"{prefix}/{k}": v.detach().cpu().to(torch.float32).numpy().copy() for k, v in items}
