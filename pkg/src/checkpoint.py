"""
Checkpoint File Format

Layout (little-endian):
    [offset] [type]              [description]
    0000     8 bytes             magic "LPCCKPT1"
    0008     uint64              manifest length L in bytes
    0016     L bytes (UTF-8)     JSON manifest: entries (name, shape, offset) + meta
    16+L     float64 blocks      raw parameter data, offsets relative to this point

Arrays round-trip bit-exactly. `meta` carries JSON-serializable run state
(configs, step counters).
"""

import json
import logging
import os
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"LPCCKPT1"
_HEADER = struct.Struct("<8sQ")


class CheckpointFormatError(ValueError):
    """File is not a well-formed checkpoint"""


def save_checkpoint(path: Union[str, Path], arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    """Write `arrays` (in insertion order) and `meta` to `path` atomically"""
    path = Path(path)
    entries = []
    blocks = []
    offset = 0
    for name, array in arrays.items():
        data = np.ascontiguousarray(array, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blocks.append(data.tobytes())
        offset += data.nbytes

    manifest = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(_HEADER.pack(MAGIC, len(manifest)))
            f.write(manifest)
            for block in blocks:
                f.write(block)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"could not write checkpoint {path}: {exc}") from exc
    logger.debug("Checkpoint written: %s (%d arrays, %d bytes)", path, len(entries), offset)
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (arrays in file order, meta)"""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise OSError(f"could not read checkpoint {path}: {exc}") from exc

    if len(raw) < _HEADER.size:
        raise CheckpointFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, manifest_len = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    data_start = _HEADER.size + manifest_len
    if len(raw) < data_start:
        raise CheckpointFormatError(f"{path}: manifest truncated at byte {len(raw)}")
    try:
        manifest = json.loads(raw[_HEADER.size:data_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable manifest at byte {_HEADER.size}") from exc

    arrays = {}
    for entry in manifest.get("entries", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = data_start + entry["offset"]
        end = start + 8 * count
        if end > len(raw):
            raise CheckpointFormatError(f"{path}: block '{entry['name']}' runs past end of file (byte {end})")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(shape).astype(np.float64)
    return arrays, manifest.get("meta", {})
