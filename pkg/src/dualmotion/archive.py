"""Directory archive of named float32 tensors: ``manifest.json`` plus one raw binary per tensor.

Each binary holds little-endian 32-bit floats in row-major order. The manifest is written
with sorted keys so that saving the same content twice yields identical bytes.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


class ArchiveError(ValueError):
    pass


def sanitize(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_archive(directory: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    seen_files = set()
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f4", order="C")
        fname = sanitize(name) + ".f32"
        if fname in seen_files:
            raise ArchiveError(f"tensor names collide after sanitizing: {name!r}")
        seen_files.add(fname)
        (directory / fname).write_bytes(arr.tobytes(order="C"))
        entries.append({"name": name, "file": fname, "shape": list(arr.shape)})
    manifest = dict(header)
    manifest["format_version"] = FORMAT_VERSION
    manifest["tensors"] = entries
    dump_json(manifest, directory / MANIFEST)
    return directory


def read_archive(directory: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.is_file():
        raise ArchiveError(f"no {MANIFEST} in {directory}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArchiveError(f"corrupt manifest in {directory}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ArchiveError(f"archive format version {version!r}, expected {FORMAT_VERSION}")
    tensors = {}
    for entry in manifest.get("tensors", []):
        raw = (directory / entry["file"]).read_bytes() if (directory / entry["file"]).is_file() else None
        if raw is None:
            raise ArchiveError(f"missing tensor file {entry['file']}")
        shape = tuple(entry["shape"])
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if len(raw) != expected:
            raise ArchiveError(f"{entry['file']}: {len(raw)} bytes, expected {expected}")
        tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    header = {k: v for k, v in manifest.items() if k not in ("tensors", "format_version")}
    return header, tensors
