"""Single-file binary checkpoints for named arrays plus a JSON side channel.

Layout (all integers little-endian):

    bytes 0..8    magic ``b"SKBCKPT\\0"``
    bytes 8..12   u32 format version (currently 1)
    bytes 12..20  u64 manifest length in bytes
    manifest      UTF-8 JSON: {"arrays": {name: {shape, dtype, offset}}, "meta": {...}}
    payload       raw array bytes at the manifest offsets

Arrays are float64 (``"f8"``) or int64 (``"i8"``), stored little-endian and
C-contiguous. ``meta`` carries arbitrary JSON (config hash, codebook bounds,
pruning assignments). Loads verify every field and fail loudly on mismatch
rather than returning partial state.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SKBCKPT\x00"
VERSION = 1

_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _code_for(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "f8"
    if arr.dtype.kind in ("i", "u", "b"):
        return "i8"
    raise DataError(f"unsupported array dtype {arr.dtype}")


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = _code_for(arr)
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": code, "offset": offset}
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(
        {"arrays": entries, "meta": meta or {}}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<Q", raw[12:20])
    if 20 + mlen > len(raw):
        raise DataError(f"{path}: truncated manifest ({mlen} bytes declared)")
    try:
        manifest = json.loads(raw[20 : 20 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt manifest: {exc}") from exc
    if not isinstance(manifest, dict) or "arrays" not in manifest:
        raise DataError(f"{path}: manifest missing 'arrays'")

    payload = raw[20 + mlen :]
    arrays: dict[str, np.ndarray] = {}
    for name, entry in manifest["arrays"].items():
        code = entry["dtype"]
        if code not in _DTYPES:
            raise DataError(f"{path}: array {name!r} has unknown dtype {code!r}")
        dtype = _DTYPES[code]
        shape = tuple(int(n) for n in entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(entry["offset"])
        end = start + count * dtype.itemsize
        if start < 0 or end > len(payload):
            raise DataError(f"{path}: array {name!r} extends past end of file")
        arrays[name] = np.frombuffer(payload[start:end], dtype=dtype).reshape(shape).copy()
    return arrays, manifest.get("meta", {})
