"""Core raster types: georeferenced grids, scenes, village footprints, band stats.

Conventions used throughout the package:

* Pixel arrays are band-major ``float`` arrays of shape ``(bands, height, width)``.
* The validity mask is per pixel (shared by all bands), shape ``(height, width)``.
* ``origin`` is the projected coordinate of the grid's top-left corner in
  meters; row indices increase southward (y decreases), column indices
  increase eastward (x increases).
* Geolocation uses a local equirectangular projection: degrees are scaled to
  meters with the factors evaluated at the footprint's centroid latitude.
  Footprints are 3.36 km squares, so the distortion of this shortcut is
  negligible and no projection library is needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Sequence

import numpy as np

from .errors import CoverageError, InputError, SchemaError

# Meters per degree of latitude on the spherical-earth approximation.
M_PER_DEG_LAT = 111_320.0

# Side of a village footprint in meters and the tile geometry it implies.
FOOTPRINT_SIDE_M = 3360.0
TILE_PIXEL_SIZE_M = 15.0
TILE_SIZE_PX = 224

MS_BANDS = ("blue", "green", "red", "nir")
RGB_BANDS = ("red", "green", "blue")


def meters_per_degree(lat_deg: float) -> tuple[float, float]:
    """Meters per degree of (latitude, longitude) at the given latitude."""
    return M_PER_DEG_LAT, M_PER_DEG_LAT * math.cos(math.radians(lat_deg))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class RasterGrid:
    """Immutable georeferenced multi-band pixel grid with a validity mask."""

    bands: tuple[str, ...]
    pixels: np.ndarray          # (bands, height, width) float
    valid: np.ndarray           # (height, width) bool
    pixel_size: float           # meters
    origin: tuple[float, float]  # projected (x, y) of the top-left corner, meters

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 3:
            raise SchemaError(f"pixels must be (bands, h, w), got shape {pixels.shape}")
        nb, h, w = pixels.shape
        if nb != len(self.bands):
            raise SchemaError(f"{len(self.bands)} band names but {nb} pixel planes")
        if h <= 0 or w <= 0:
            raise SchemaError("raster dimensions must be positive")
        valid = np.asarray(self.valid, dtype=bool)
        if valid.shape != (h, w):
            raise SchemaError(f"valid mask shape {valid.shape} != pixel shape {(h, w)}")
        if not self.pixel_size > 0:
            raise SchemaError("pixel_size must be positive")
        object.__setattr__(self, "bands", tuple(self.bands))
        object.__setattr__(self, "pixels", _readonly(pixels))
        object.__setattr__(self, "valid", _readonly(valid))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def band_index(self, name: str) -> int:
        try:
            return self.bands.index(name)
        except ValueError:
            raise SchemaError(f"band {name!r} not present; have {self.bands}") from None

    def band(self, name: str) -> np.ndarray:
        return self.pixels[self.band_index(name)]

    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the grid extent in meters."""
        ox, oy = self.origin
        return (ox, oy - self.height * self.pixel_size, ox + self.width * self.pixel_size, oy)

    def window(self, bounds: tuple[float, float, float, float]) -> tuple[int, int, int, int]:
        """Row/col slice (r0, r1, c0, c1) of pixels whose centers fall in ``bounds``.

        Raises CoverageError when no pixel center lies inside.
        """
        xmin, ymin, xmax, ymax = bounds
        ox, oy = self.origin
        ps = self.pixel_size
        # Pixel centers: x = ox + (c + 0.5) ps, y = oy - (r + 0.5) ps.
        c0 = max(0, int(math.ceil((xmin - ox) / ps - 0.5)))
        c1 = min(self.width, int(math.floor((xmax - ox) / ps - 0.5)) + 1)
        r0 = max(0, int(math.ceil((oy - ymax) / ps - 0.5)))
        r1 = min(self.height, int(math.floor((oy - ymin) / ps - 0.5)) + 1)
        if c0 >= c1 or r0 >= r1:
            raise CoverageError(f"bounds {bounds} do not intersect grid extent {self.bounds()}")
        return r0, r1, c0, c1


@dataclass(frozen=True)
class Scene:
    """One acquisition: 30 m multispectral grid plus 15 m panchromatic band.

    ``qa`` flags cloudy pixels at multispectral resolution. The grids' own
    validity masks carry sensor gaps (SLC-off stripes and the like).
    """

    ms: RasterGrid
    pan: RasterGrid
    qa: np.ndarray              # (h, w) bool, True = cloud
    acquired: date
    tier: int = 1

    def __post_init__(self) -> None:
        if self.pan.width != 2 * self.ms.width or self.pan.height != 2 * self.ms.height:
            raise SchemaError(
                f"pan dims {self.pan.height}x{self.pan.width} must be exactly twice "
                f"ms dims {self.ms.height}x{self.ms.width}"
            )
        qa = np.asarray(self.qa, dtype=bool)
        if qa.shape != (self.ms.height, self.ms.width):
            raise SchemaError(f"qa shape {qa.shape} != ms shape {(self.ms.height, self.ms.width)}")
        if self.tier not in (1, 2):
            raise SchemaError(f"tier must be 1 or 2, got {self.tier}")
        object.__setattr__(self, "qa", _readonly(qa))


@dataclass(frozen=True)
class AOIFootprint:
    """Axis-aligned square area of interest around a village centroid."""

    village_id: str
    lat: float
    lon: float
    side: float = FOOTPRINT_SIDE_M

    def __post_init__(self) -> None:
        if not self.side > 0:
            raise SchemaError("footprint side must be positive")

    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) in meters, local projection at the centroid."""
        mlat, mlon = meters_per_degree(self.lat)
        cx = self.lon * mlon
        cy = self.lat * mlat
        h = self.side / 2.0
        return (cx - h, cy - h, cx + h, cy + h)

    @property
    def area_km2(self) -> float:
        return (self.side / 1000.0) ** 2


@dataclass(frozen=True)
class BandStats:
    """Per-band mean and standard deviation over a tile collection."""

    bands: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != (len(self.bands),) or std.shape != (len(self.bands),):
            raise SchemaError("stats arrays must have one entry per band")
        if np.any(std < 0):
            raise SchemaError("std must be nonnegative")
        object.__setattr__(self, "bands", tuple(self.bands))
        object.__setattr__(self, "mean", _readonly(mean))
        object.__setattr__(self, "std", _readonly(std))


# Mean NDVI sentinel for footprints with no valid pixel; strictly below the
# valid [-1, 1] range so such scenes sort last.
EMPTY_NDVI = -2.0


def ndvi(scene: Scene) -> RasterGrid:
    """Normalized difference vegetation index (nir - red) / (nir + red).

    Zero-denominator pixels are marked invalid with value 0 so they cannot
    poison downstream ranking with NaNs.
    """
    nir = scene.ms.band("nir").astype(np.float64)
    red = scene.ms.band("red").astype(np.float64)
    denom = nir + red
    nonzero = denom != 0
    out = np.zeros_like(nir)
    np.divide(nir - red, denom, out=out, where=nonzero)
    return RasterGrid(
        bands=("ndvi",),
        pixels=out[np.newaxis].astype(np.float32),
        valid=scene.ms.valid & nonzero,
        pixel_size=scene.ms.pixel_size,
        origin=scene.ms.origin,
    )


def mean_ndvi(scene: Scene, aoi: AOIFootprint) -> float:
    """Mean NDVI over valid pixels inside the footprint; EMPTY_NDVI if none."""
    grid = ndvi(scene)
    r0, r1, c0, c1 = grid.window(aoi.bounds())
    values = grid.pixels[0, r0:r1, c0:c1]
    mask = grid.valid[r0:r1, c0:c1]
    if not mask.any():
        return EMPTY_NDVI
    return float(values[mask].mean())


def compute_band_stats(tiles: Iterable[RasterGrid]) -> BandStats:
    """Per-band mean/std over the valid pixels of every tile in the collection."""
    tiles = list(tiles)
    if not tiles:
        raise InputError("band stats need at least one tile")
    bands = tiles[0].bands
    total = np.zeros(len(bands))
    total_sq = np.zeros(len(bands))
    count = 0
    for tile in tiles:
        if tile.bands != bands:
            raise SchemaError(f"band schema mismatch: {tile.bands} != {bands}")
        mask = tile.valid
        n = int(mask.sum())
        if n == 0:
            continue
        data = tile.pixels[:, mask].astype(np.float64)
        total += data.sum(axis=1)
        total_sq += np.square(data).sum(axis=1)
        count += n
    if count == 0:
        raise InputError("band stats need at least one valid pixel")
    mean = total / count
    var = np.maximum(total_sq / count - mean**2, 0.0)
    return BandStats(bands=bands, mean=mean, std=np.sqrt(var))


def normalize(tile: RasterGrid, stats: BandStats) -> RasterGrid:
    """Standardize each band to (x - mean) / std.

    Zero-std bands map to 0 (a constant band carries no signal). Invalid
    pixels are also set to 0, which equals the band mean after normalization,
    so gaps enter downstream models as a neutral value.
    """
    if tile.bands != stats.bands:
        raise SchemaError(f"stats bands {stats.bands} != tile bands {tile.bands}")
    std = np.where(stats.std == 0, 1.0, stats.std)
    out = (tile.pixels.astype(np.float64) - stats.mean[:, None, None]) / std[:, None, None]
    out[stats.std == 0] = 0.0
    out[:, ~tile.valid] = 0.0
    return RasterGrid(
        bands=tile.bands,
        pixels=out.astype(np.float32),
        valid=tile.valid,
        pixel_size=tile.pixel_size,
        origin=tile.origin,
    )
