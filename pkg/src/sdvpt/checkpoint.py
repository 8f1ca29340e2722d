"""Checkpoint directories: manifest.json plus one tensor-container blob."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container

BLOB = "weights.sdvt"
MANIFEST = "manifest.json"


def content_hash(arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        h.update(arr.tobytes())
    return h.hexdigest()


def _entry_table(blob: bytes) -> list[dict]:
    """Parse just the entry table of an encoded container."""
    pos = 12
    (count,) = struct.unpack_from("<I", blob, 8)
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode()
        pos += n
        code, rank = struct.unpack_from("<BI", blob, pos)
        pos += 5
        dims = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        offset, nbytes = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        out.append({"name": name, "shape": list(dims), "dtype": "f32" if code == 0 else "f64",
                    "offset": offset, "nbytes": nbytes})
    return out


@dataclass
class Checkpoint:
    path: Path
    meta: dict
    arrays: dict[str, np.ndarray]

    @property
    def hash(self) -> str:
        return self.meta["hash"]

    @property
    def stage(self) -> str:
        return self.meta["stage"]


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> Checkpoint:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ordered = {k: np.asarray(arrays[k]) for k in sorted(arrays)}
    blob = container.encode(ordered)
    (path / BLOB).write_bytes(blob)
    manifest = dict(meta)
    manifest["entries"] = _entry_table(blob)
    manifest["hash"] = content_hash(ordered)
    manifest["format_version"] = container.VERSION
    (path / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return Checkpoint(path, manifest, ordered)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    meta = json.loads((path / MANIFEST).read_text())
    arrays = container.load(path / BLOB)
    if content_hash(arrays) != meta.get("hash"):
        raise container.FormatError(f"{path}: content hash does not match manifest")
    return Checkpoint(path, meta, arrays)


def directory_hash(path) -> str:
    """Hash of the stored manifest and blob bytes."""
    path = Path(path)
    h = hashlib.sha256()
    h.update((path / MANIFEST).read_bytes())
    h.update((path / BLOB).read_bytes())
    return h.hexdigest()
