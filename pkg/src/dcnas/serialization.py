"""Named-array files: a raw little-endian float64 payload plus a JSON manifest.

``save_arrays("run/alpha", arrays, meta)`` writes ``run/alpha.bin`` and
``run/alpha.json``. The manifest lists every array's name, shape and offset
(in float64 elements) into the payload, followed by free-form metadata.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError

FORMAT = "dcnas-named-arrays"
VERSION = 1


def _prefix(path: str | Path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> Path:
    """Write the payload and manifest; returns the manifest path."""
    base = _prefix(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size
    payload = base.with_suffix(".bin")
    payload.write_bytes(b"".join(chunks))
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": "<f8",
        "payload": payload.name,
        "arrays": entries,
        "meta": meta or {},
    }
    out = base.with_suffix(".json")
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    base = _prefix(path)
    manifest_path = base.with_suffix(".json")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read named-array manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise DataError(f"{manifest_path} is not a {FORMAT} manifest")
    payload = manifest_path.parent / manifest["payload"]
    try:
        flat = np.frombuffer(payload.read_bytes(), dtype="<f8")
    except OSError as exc:
        raise DataError(f"cannot read payload {payload}: {exc}") from exc
    arrays = {}
    for e in manifest["arrays"]:
        start, count = e["offset"], e["count"]
        if start + count > flat.size:
            raise DataError(f"{payload}: array {e['name']} runs past the end of the payload")
        arrays[e["name"]] = flat[start : start + count].reshape(e["shape"]).astype(np.float64)
    return arrays, manifest.get("meta", {})
