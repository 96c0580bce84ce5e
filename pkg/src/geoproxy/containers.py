"""Binary container formats for rasters and model checkpoints.

Raster container (``.eorc``)::

    magic "EORC1" | u32 width | u32 height | u32 band_count |
    f64 pixel_size | f64 origin_x | f64 origin_y | u8 has_mask |
    band-major f32 pixels | (if has_mask) height*width bytes of 0/1

All integers and floats little-endian. Band names live in a JSON sidecar
manifest next to the file (``<name>.eorc.json``), which may carry extra
per-file metadata (acquisition date, tier, solar zenith, ...).

Checkpoint container (``.eock``)::

    magic "EOCK1" | u32 header_len | UTF-8 JSON header | f32 arrays

The header holds ``config`` and ``train_spec`` dicts plus an ``arrays``
manifest of (name, shape, offset) entries; offsets are relative to the start
of the data section. Array order is the insertion order of the mapping, so
writes are byte-deterministic.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import SchemaError
from .raster import RasterGrid

RASTER_MAGIC = b"EORC1"
CHECKPOINT_MAGIC = b"EOCK1"

_RASTER_HEADER = struct.Struct("<IIIdddB")


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_raster(path: str | Path, grid: RasterGrid, extra: Mapping[str, Any] | None = None) -> Path:
    """Write a grid to ``path`` plus a JSON sidecar with band names and extras."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    has_mask = 1  # masks are always materialized in this pipeline
    header = _RASTER_HEADER.pack(
        grid.width, grid.height, len(grid.bands),
        grid.pixel_size, grid.origin[0], grid.origin[1], has_mask,
    )
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(header)
        fh.write(np.ascontiguousarray(grid.pixels, dtype="<f4").tobytes())
        fh.write(grid.valid.astype(np.uint8).tobytes())
    manifest: dict[str, Any] = {"bands": list(grid.bands)}
    if extra:
        manifest.update(extra)
    sidecar_path(path).write_text(json.dumps(manifest, sort_keys=True) + "\n")
    return path


def read_raster(path: str | Path) -> tuple[RasterGrid, dict[str, Any]]:
    """Read a grid and its sidecar manifest; returns (grid, manifest)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:5] != RASTER_MAGIC:
        raise SchemaError(f"{path}: bad magic {raw[:5]!r}")
    width, height, nbands, pixel_size, ox, oy, has_mask = _RASTER_HEADER.unpack_from(raw, 5)
    offset = 5 + _RASTER_HEADER.size
    n_pix = width * height * nbands
    pixels = np.frombuffer(raw, dtype="<f4", count=n_pix, offset=offset)
    pixels = pixels.reshape(nbands, height, width)
    offset += 4 * n_pix
    if has_mask:
        mask = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=offset)
        valid = mask.reshape(height, width).astype(bool)
    else:
        valid = np.ones((height, width), dtype=bool)
    manifest = json.loads(sidecar_path(path).read_text())
    bands = tuple(manifest["bands"])
    if len(bands) != nbands:
        raise SchemaError(f"{path}: sidecar lists {len(bands)} bands, file has {nbands}")
    grid = RasterGrid(bands=bands, pixels=pixels, valid=valid,
                      pixel_size=pixel_size, origin=(ox, oy))
    return grid, manifest


def write_checkpoint(
    path: str | Path,
    arrays: Mapping[str, np.ndarray],
    config: Mapping[str, Any],
    train_spec: Mapping[str, Any] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": dict(config),
        "train_spec": dict(train_spec) if train_spec is not None else None,
        "arrays": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any], dict[str, Any] | None]:
    """Returns (arrays, config, train_spec); arrays keep manifest order."""
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise SchemaError(f"{path}: bad magic {raw[:5]!r}")
    (header_len,) = struct.unpack_from("<I", raw, 5)
    header = json.loads(raw[9:9 + header_len].decode("utf-8"))
    data_start = 9 + header_len
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=data_start + entry["offset"])
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return arrays, header["config"], header["train_spec"]
