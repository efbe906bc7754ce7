"""Checkpoint container: a one-line UTF-8 JSON manifest followed by a float64 blob.

Manifest keys::

    format_version  1
    tensors         [{name, shape, offset, nbytes}, ...]   offsets into the blob
    meta            free-form JSON (architecture, optimizer scalars, RNG state ...)

Values in the blob are little-endian float64, row-major, packed in manifest order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import FormatVersionError, TruncatedBlobError

FORMAT_VERSION = 1
_LE = np.dtype("<f8")


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=_LE)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        chunks.append(a.tobytes())
        offset += a.nbytes
    manifest = {"format_version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}}
    head = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(head + b"\n")
        for c in chunks:
            fh.write(c)


def load_tensors(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise TruncatedBlobError(f"{path}: no manifest terminator")
    manifest = json.loads(raw[:nl].decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(
            f"{path}: format_version {manifest.get('format_version')!r}, expected {FORMAT_VERSION}")
    blob = raw[nl + 1:]
    out = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise TruncatedBlobError(f"{path}: tensor {e['name']} needs bytes up to {end}, blob has {len(blob)}")
        arr = np.frombuffer(blob[e["offset"]:end], dtype=_LE).astype(np.float64)
        out[e["name"]] = arr.reshape(e["shape"])
    return out, manifest["meta"]
