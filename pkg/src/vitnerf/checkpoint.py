"""Flat binary archive for named float arrays.

Layout: 8-byte magic, 8-byte little-endian header length, a canonical JSON
header (format version, metadata, entry table sorted by name), then the raw
little-endian payloads in entry order. Writing the same content twice
produces byte-identical files.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"VNARCH01"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_archive(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payloads = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if not np.issubdtype(arr.dtype, np.floating):
            raise CheckpointError(f"entry {name!r} is not a float array ({arr.dtype})")
        dtype = "<f4" if arr.dtype == np.float32 else "<f8"
        raw = arr.astype(dtype).tobytes()
        entries.append({"name": name, "dtype": dtype,
                        "shape": list(arr.shape), "nbytes": len(raw)})
        payloads.append(raw)
    header = {"format_version": FORMAT_VERSION, "meta": meta or {}, "entries": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r} (not a checkpoint archive)")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {header.get('format_version')} "
                                  f"unsupported (want {FORMAT_VERSION})")
        arrays = {}
        for entry in header["entries"]:
            raw = fh.read(entry["nbytes"])
            if len(raw) != entry["nbytes"]:
                raise CheckpointError(f"{path}: truncated payload for {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(
                entry["shape"]).copy()
    return arrays, header["meta"]
