"""Raw little-endian array container: ``manifest.json`` plus one ``.bin`` per array."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

MANIFEST = "manifest.json"
FORMAT = "vmanifold-arrays/1"
_DTYPES = {"float32": np.dtype("<f4"), "complex64": np.dtype("<c8")}


class CorruptionError(IOError):
    """Container contents disagree with the manifest."""


def _element_type(a: np.ndarray) -> str:
    if np.iscomplexobj(a):
        return "complex64"
    if np.issubdtype(a.dtype, np.floating):
        return "float32"
    raise TypeError(f"unsupported element type {a.dtype}; store float or complex arrays")


def save_container(directory, arrays: dict, axes: dict | None = None, meta: dict | None = None) -> Path:
    """Write ``arrays`` (name -> ndarray) as float32/complex64 little-endian raw files.

    ``axes`` optionally maps names to an axis-order string such as
    ``"z,frame,coil,point"``; ``meta`` is stored verbatim in the manifest.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    axes = axes or {}
    entries = []
    for name, a in arrays.items():
        a = np.asarray(a)
        kind = _element_type(a)
        raw = np.ascontiguousarray(a, dtype=_DTYPES[kind]).tobytes()
        fname = f"{name}.bin"
        (d / fname).write_bytes(raw)
        entries.append({"name": name, "file": fname, "dtype": kind, "byteorder": "little",
                        "shape": list(a.shape), "axes": axes.get(name, ""), "nbytes": len(raw)})
    manifest = {"format": FORMAT, "arrays": entries, "meta": meta or {}}
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no array container at {directory}")
    m = json.loads(path.read_text())
    if m.get("format") != FORMAT:
        raise CorruptionError(f"{path}: unknown container format {m.get('format')!r}")
    return m


def load_container(directory) -> dict[str, np.ndarray]:
    d = Path(directory)
    out = {}
    for e in read_manifest(d)["arrays"]:
        path = d / e["file"]
        size = os.path.getsize(path) if path.exists() else -1
        if size != e["nbytes"]:
            raise CorruptionError(f"array {e['name']!r}: expected {e['nbytes']} bytes, found {max(size, 0)}")
        dt = _DTYPES[e["dtype"]]
        if int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize != e["nbytes"]:
            raise CorruptionError(f"array {e['name']!r}: shape {e['shape']} inconsistent with byte count")
        out[e["name"]] = np.frombuffer(path.read_bytes(), dtype=dt).reshape(e["shape"]).copy()
    return out
