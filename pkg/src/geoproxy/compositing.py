"""Scene-to-tile compositing: cloud filtering, NDVI ranking, gap-filling
mosaic, topographic correction, and pansharpening.

The end product of this module is one clean 224x224 RGB tile per
village-year at 15 m, built from however many partly cloudy, partly gapped
acquisitions the year offered.

Pixel usability for mosaicking combines three masks: the grid validity mask
(sensor gaps), the QA cloud flag, and a saturation test. Saturation is
evaluated on the raw scene values before any radiometric correction, since
it is a sensor property; build_composite therefore computes saturation masks
first and carries them through the corrected scenes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CoverageError, SchemaError
from .raster import (
    AOIFootprint,
    RasterGrid,
    RGB_BANDS,
    Scene,
    mean_ndvi,
)

log = logging.getLogger(__name__)

# Reflectance-scale ceiling; a pixel counts as saturated when any band
# reaches 99.9% of it.
REPRESENTABLE_MAX = 1.0
SATURATION_FRACTION = 0.999

# Regression slopes below this are treated as flat (band returned unchanged).
MIN_C_SLOPE = 1e-9

# 5x5 binomial low-pass used by the MRA pansharpener.
_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class IlluminationGrid:
    """Per-pixel cosine of the solar incidence angle plus the solar zenith."""

    cos_i: np.ndarray   # (h, w), values in [-1, 1]
    theta_z: float      # radians, [0, pi/2)

    def __post_init__(self) -> None:
        cos_i = np.asarray(self.cos_i, dtype=np.float64)
        if cos_i.ndim != 2:
            raise SchemaError("cos_i must be a 2-D grid")
        if np.any(cos_i < -1.0) or np.any(cos_i > 1.0):
            raise SchemaError("cos_i values must lie in [-1, 1]")
        if not (0.0 <= self.theta_z < np.pi / 2):
            raise SchemaError("theta_z must lie in [0, pi/2)")
        object.__setattr__(self, "cos_i", cos_i)


@dataclass(frozen=True)
class CompositeTile:
    """A finished village-year tile plus the per-pixel source bookkeeping."""

    village_id: str
    year: int
    grid: RasterGrid                 # 224x224, bands (red, green, blue), 15 m
    fill_report: np.ndarray          # (224, 224) int16, rank index or -1

    def __post_init__(self) -> None:
        if self.grid.bands != RGB_BANDS:
            raise SchemaError(f"composite bands must be {RGB_BANDS}, got {self.grid.bands}")
        fill = np.asarray(self.fill_report, dtype=np.int16)
        if fill.shape != (self.grid.height, self.grid.width):
            raise SchemaError("fill_report shape must match the tile")
        if np.any(self.grid.valid & (fill < 0)):
            raise SchemaError("every valid pixel needs a fill_report entry")
        object.__setattr__(self, "fill_report", fill)

    @property
    def gap_fraction(self) -> float:
        return 1.0 - float(self.grid.valid.mean())


def saturation_mask(scene: Scene) -> np.ndarray:
    """True where any multispectral band reaches the saturation threshold."""
    return (scene.ms.pixels >= SATURATION_FRACTION * REPRESENTABLE_MAX).any(axis=0)


def cloud_fraction(scene: Scene, aoi_union: Sequence[AOIFootprint]) -> float:
    """Fraction of cloud-flagged pixels within the union of the footprints."""
    member = np.zeros((scene.ms.height, scene.ms.width), dtype=bool)
    for aoi in aoi_union:
        try:
            r0, r1, c0, c1 = scene.ms.window(aoi.bounds())
        except CoverageError:
            continue
        member[r0:r1, c0:c1] = True
    total = int(member.sum())
    if total == 0:
        raise CoverageError("footprint union does not intersect the scene")
    return float(scene.qa[member].sum()) / total


def filter_scenes(
    scenes: Sequence[Scene],
    aoi_union: Sequence[AOIFootprint],
    threshold: float = 0.05,
) -> list[Scene]:
    """Keep scenes whose cloud fraction over the union is <= threshold.

    The boundary is kept: the selection rule removes strictly more than the
    threshold. Input order is preserved.
    """
    if not 0.0 <= threshold <= 1.0:
        raise SchemaError(f"threshold must be in [0, 1], got {threshold}")
    return [s for s in scenes if cloud_fraction(s, aoi_union) <= threshold]


def rank_scenes(scenes: Sequence[Scene], aoi: AOIFootprint) -> list[Scene]:
    """Order scenes by descending mean NDVI over the footprint.

    Ties break toward the earlier acquisition date, then stable input order.
    """
    keyed = [
        (-mean_ndvi(scene, aoi), scene.acquired.toordinal(), idx)
        for idx, scene in enumerate(scenes)
    ]
    order = sorted(range(len(scenes)), key=lambda i: keyed[i])
    return [scenes[i] for i in order]


def usable_mask(scene: Scene, saturated: np.ndarray | None = None) -> np.ndarray:
    """Multispectral-resolution mask of pixels a mosaic may take from the scene.

    Requires the MS pixel valid, cloud-free, unsaturated, and all four pan
    subpixels valid, so the MS and pan mosaics stay source-consistent.
    """
    if saturated is None:
        saturated = saturation_mask(scene)
    h, w = scene.ms.height, scene.ms.width
    pan_ok = scene.pan.valid.reshape(h, 2, w, 2).all(axis=(1, 3))
    return scene.ms.valid & ~scene.qa & ~saturated & pan_ok


def mosaic_layers(
    layers: Sequence[tuple[np.ndarray, np.ndarray]],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """First-usable-wins composition of (pixels, usable) layers.

    Returns (pixels, valid, fill) where fill holds the index of the layer
    each pixel came from, -1 where no layer was usable.
    """
    if not layers:
        raise SchemaError("mosaic needs at least one layer")
    first_pixels, first_mask = layers[0]
    out = np.zeros_like(first_pixels)
    valid = np.zeros(first_mask.shape, dtype=bool)
    fill = np.full(first_mask.shape, -1, dtype=np.int16)
    for idx, (pixels, usable) in enumerate(layers):
        take = usable & ~valid
        if not take.any():
            continue
        out[:, take] = pixels[:, take]
        fill[take] = idx
        valid |= take
    return out, valid, fill


@dataclass(frozen=True)
class MosaicResult:
    ms: RasterGrid
    pan: RasterGrid
    fill: np.ndarray   # (h, w) int16 at MS resolution


def recursive_mosaic(
    ranked: Sequence[Scene],
    aoi: AOIFootprint,
    saturated: Sequence[np.ndarray] | None = None,
) -> MosaicResult:
    """Fill the footprint from the ranked scene list, best scene first.

    Walks the list taking every still-unfilled pixel that is usable in the
    current scene, until the footprint is full or the list ends. MS and pan
    are composed in the same pass from the same per-pixel source decision.
    """
    if not ranked:
        raise SchemaError("mosaic needs at least one scene")
    bounds = aoi.bounds()
    ps_ms = ranked[0].ms.pixel_size
    n_ms = int(round(aoi.side / ps_ms))
    n_pan = 2 * n_ms
    ms_layers: list[tuple[np.ndarray, np.ndarray]] = []
    pan_layers: list[tuple[np.ndarray, np.ndarray]] = []
    for idx, scene in enumerate(ranked):
        sat = saturated[idx] if saturated is not None else None
        ms_px = np.zeros((len(scene.ms.bands), n_ms, n_ms), dtype=np.float32)
        ms_ok = np.zeros((n_ms, n_ms), dtype=bool)
        pan_px = np.zeros((1, n_pan, n_pan), dtype=np.float32)
        try:
            r0, r1, c0, c1 = scene.ms.window(bounds)
        except CoverageError:
            ms_layers.append((ms_px, ms_ok))
            pan_layers.append((pan_px, np.zeros((n_pan, n_pan), dtype=bool)))
            continue
        # Offset of the scene window inside the AOI lattice.
        ox, oy = scene.ms.origin
        dc = int(round((ox + c0 * ps_ms - bounds[0]) / ps_ms))
        dr = int(round((bounds[3] - (oy - r0 * ps_ms)) / ps_ms))
        h, w = r1 - r0, c1 - c0
        ms_px[:, dr:dr + h, dc:dc + w] = scene.ms.pixels[:, r0:r1, c0:c1]
        ms_ok[dr:dr + h, dc:dc + w] = usable_mask(scene, sat)[r0:r1, c0:c1]
        pan_px[0, 2 * dr:2 * (dr + h), 2 * dc:2 * (dc + w)] = \
            scene.pan.pixels[0, 2 * r0:2 * r1, 2 * c0:2 * c1]
        ms_layers.append((ms_px, ms_ok))
        pan_layers.append((pan_px, np.kron(ms_ok, np.ones((2, 2), dtype=bool))))
    ms_pixels, ms_valid, fill = mosaic_layers(ms_layers)
    pan_fill = np.kron(fill, np.ones((2, 2), dtype=np.int16))
    pan_pixels = np.zeros((1, n_pan, n_pan), dtype=np.float32)
    for idx, (px, _) in enumerate(pan_layers):
        take = pan_fill == idx
        pan_pixels[:, take] = px[:, take]
    origin = (bounds[0], bounds[3])
    ms_grid = RasterGrid(bands=ranked[0].ms.bands, pixels=ms_pixels, valid=ms_valid,
                         pixel_size=ps_ms, origin=origin)
    pan_grid = RasterGrid(bands=ranked[0].pan.bands, pixels=pan_pixels,
                          valid=pan_fill >= 0, pixel_size=ps_ms / 2, origin=origin)
    return MosaicResult(ms=ms_grid, pan=pan_grid, fill=fill)


def _fit_band_line(band: np.ndarray, cos_i: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Least-squares slope/intercept of band ~ cos_i over masked pixels."""
    x = cos_i[mask]
    y = band[mask].astype(np.float64)
    n = x.size
    if n < 2:
        return 0.0, float(y.mean()) if n else 0.0
    sx = x.sum()
    sy = y.sum()
    sxx = float(x @ x)
    sxy = float(x @ y)
    det = n * sxx - sx * sx
    if det == 0.0:
        return 0.0, float(y.mean())
    m = (n * sxy - sx * sy) / det
    b = (sy - m * sx) / n
    return m, b


def c_correct(scene: Scene, illum: IlluminationGrid) -> Scene:
    """Topographic C-correction: rho' = rho (cos theta_z + c) / (cos i + c).

    The per-band constant c = b/m comes from regressing the band on cos i
    over valid pixels. Bands whose regression slope is effectively zero are
    returned unchanged. The pan band is corrected with the illumination grid
    upsampled 2x (nearest), since terrain varies far more slowly than 30 m.
    """
    if illum.cos_i.shape != (scene.ms.height, scene.ms.width):
        raise SchemaError(
            f"illumination shape {illum.cos_i.shape} != ms shape "
            f"{(scene.ms.height, scene.ms.width)}"
        )
    cos_tz = float(np.cos(illum.theta_z))
    cos_i = illum.cos_i

    def corrected(band: np.ndarray, cos_grid: np.ndarray, mask: np.ndarray) -> np.ndarray:
        m, b = _fit_band_line(band, cos_grid, mask)
        if abs(m) < MIN_C_SLOPE:
            return band.astype(np.float64)
        c = b / m
        return band.astype(np.float64) * (cos_tz + c) / (cos_grid + c)

    ms_out = np.stack([
        corrected(scene.ms.pixels[k], cos_i, scene.ms.valid)
        for k in range(len(scene.ms.bands))
    ])
    cos_i_pan = np.kron(cos_i, np.ones((2, 2)))
    pan_out = corrected(scene.pan.pixels[0], cos_i_pan, scene.pan.valid)[np.newaxis]
    ms = RasterGrid(bands=scene.ms.bands, pixels=ms_out.astype(np.float32),
                    valid=scene.ms.valid, pixel_size=scene.ms.pixel_size,
                    origin=scene.ms.origin)
    pan = RasterGrid(bands=scene.pan.bands, pixels=pan_out.astype(np.float32),
                     valid=scene.pan.valid, pixel_size=scene.pan.pixel_size,
                     origin=scene.pan.origin)
    return Scene(ms=ms, pan=pan, qa=scene.qa, acquired=scene.acquired, tier=scene.tier)


def bilinear_upsample2(values: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mask-aware 2x bilinear upsampling of (bands, h, w) values.

    Output pixel centers sit at input coordinates (i + 0.5)/2 - 0.5. Invalid
    input pixels contribute zero weight, so gaps do not bleed into their
    neighborhood; outputs with no valid support are invalid.
    """
    nb, h, w = values.shape
    coords = (np.arange(2 * h) + 0.5) / 2.0 - 0.5
    lo = np.clip(np.floor(coords).astype(int), 0, h - 1)
    hi = np.clip(lo + 1, 0, h - 1)
    frac = np.clip(coords - lo, 0.0, 1.0)
    coords_w = (np.arange(2 * w) + 0.5) / 2.0 - 0.5
    lo_w = np.clip(np.floor(coords_w).astype(int), 0, w - 1)
    hi_w = np.clip(lo_w + 1, 0, w - 1)
    frac_w = np.clip(coords_w - lo_w, 0.0, 1.0)

    wgt = mask.astype(np.float64)
    vw = values.astype(np.float64) * wgt

    def lerp_rows(a: np.ndarray) -> np.ndarray:
        return a[..., lo, :] * (1.0 - frac)[:, None] + a[..., hi, :] * frac[:, None]

    def lerp_cols(a: np.ndarray) -> np.ndarray:
        return a[..., :, lo_w] * (1.0 - frac_w) + a[..., :, hi_w] * frac_w

    num = lerp_cols(lerp_rows(vw))
    den = lerp_cols(lerp_rows(wgt))
    out = np.zeros_like(num)
    good = den > 1e-12
    np.divide(num, den[np.newaxis] if num.ndim == 3 else den, out=out, where=good)
    return out, good


def binomial5_lowpass(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Separable 5x5 binomial smoothing, renormalized over valid support."""
    wgt = mask.astype(np.float64)
    vw = values.astype(np.float64) * wgt

    def smooth1d(a: np.ndarray, axis: int) -> np.ndarray:
        out = np.zeros_like(a)
        for tap, coef in zip(range(-2, 3), _BINOMIAL5):
            out += coef * np.roll(a, tap, axis=axis) * _roll_valid(a.shape[axis], tap, axis, a.ndim)
        return out

    def _roll_valid(n: int, tap: int, axis: int, ndim: int) -> np.ndarray:
        # Zero out wrapped-around entries introduced by np.roll.
        line = np.ones(n)
        if tap > 0:
            line[:tap] = 0.0
        elif tap < 0:
            line[tap:] = 0.0
        shape = [1] * ndim
        shape[axis] = n
        return line.reshape(shape)

    num = smooth1d(smooth1d(vw, -1), -2)
    den = smooth1d(smooth1d(wgt, -1), -2)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den > 1e-12)
    return out


def pansharpen(ms_rgb: RasterGrid, pan: RasterGrid) -> RasterGrid:
    """MRA detail injection: out_k = up(MS_k) + g_k (P - lowpass(P)).

    The per-band gain g_k = cov(up(MS_k), P_low) / var(P_low) over jointly
    valid pixels makes injected detail proportional to how strongly the band
    tracks pan brightness; a flat pan band injects nothing.
    """
    if pan.width != 2 * ms_rgb.width or pan.height != 2 * ms_rgb.height:
        raise SchemaError("pan dims must be exactly twice the MS dims")
    ms_up, up_ok = bilinear_upsample2(ms_rgb.pixels, ms_rgb.valid)
    p = pan.pixels[0].astype(np.float64)
    p_low = binomial5_lowpass(p, pan.valid)
    valid = up_ok & pan.valid
    out = ms_up.copy()
    if valid.any():
        pl = p_low[valid]
        pl_mean = pl.mean()
        var = float(np.mean((pl - pl_mean) ** 2))
        detail = p - p_low
        for k in range(ms_up.shape[0]):
            band = ms_up[k][valid]
            if var < 1e-12:
                gain = 0.0
            else:
                gain = float(np.mean((band - band.mean()) * (pl - pl_mean))) / var
            out[k][valid] += gain * detail[valid]
    return RasterGrid(bands=ms_rgb.bands, pixels=out.astype(np.float32), valid=valid,
                      pixel_size=pan.pixel_size, origin=pan.origin)


def _fit_to_tile(grid: RasterGrid, fill: np.ndarray, size: int) -> tuple[RasterGrid, np.ndarray]:
    """Center-crop or zero-pad a grid (and its fill map) to size x size."""
    h, w = grid.height, grid.width
    if (h, w) == (size, size):
        return grid, fill
    px = np.zeros((len(grid.bands), size, size), dtype=np.float32)
    ok = np.zeros((size, size), dtype=bool)
    out_fill = np.full((size, size), -1, dtype=np.int16)
    r_src = max(0, (h - size) // 2)
    c_src = max(0, (w - size) // 2)
    r_dst = max(0, (size - h) // 2)
    c_dst = max(0, (size - w) // 2)
    hh = min(h, size)
    ww = min(w, size)
    px[:, r_dst:r_dst + hh, c_dst:c_dst + ww] = grid.pixels[:, r_src:r_src + hh, c_src:c_src + ww]
    ok[r_dst:r_dst + hh, c_dst:c_dst + ww] = grid.valid[r_src:r_src + hh, c_src:c_src + ww]
    out_fill[r_dst:r_dst + hh, c_dst:c_dst + ww] = fill[r_src:r_src + hh, c_src:c_src + ww]
    ps = grid.pixel_size
    origin = (grid.origin[0] + (c_src - c_dst) * ps, grid.origin[1] - (r_src - r_dst) * ps)
    return RasterGrid(bands=grid.bands, pixels=px, valid=ok, pixel_size=ps, origin=origin), out_fill


def build_composite(
    aoi: AOIFootprint,
    year: int,
    scenes: Sequence[Scene],
    illums: Sequence[IlluminationGrid] | None = None,
    cloud_threshold: float = 0.05,
    tile_size: int = 224,
) -> CompositeTile:
    """Full per-village pipeline: filter, correct, rank, mosaic, pansharpen.

    With no usable scene the tile comes back fully invalid (100% gap) and a
    warning is logged; downstream normalization imputes the gaps.
    """
    if illums is not None and len(illums) != len(scenes):
        raise SchemaError("need one illumination grid per scene")
    keep_idx = []
    for i, s in enumerate(scenes):
        try:
            if cloud_fraction(s, [aoi]) <= cloud_threshold:
                keep_idx.append(i)
        except CoverageError:
            continue
    kept = [scenes[i] for i in keep_idx]
    saturated = [saturation_mask(s) for s in kept]
    if illums is not None:
        kept = [c_correct(s, illums[i]) for s, i in zip(kept, keep_idx)]
    if kept:
        order = sorted(
            range(len(kept)),
            key=lambda i: (-mean_ndvi(kept[i], aoi), kept[i].acquired.toordinal(), i),
        )
        ranked = [kept[i] for i in order]
        sat_ranked = [saturated[i] for i in order]
        mosaic = recursive_mosaic(ranked, aoi, saturated=sat_ranked)
        rgb_idx = [mosaic.ms.band_index(b) for b in RGB_BANDS]
        ms_rgb = RasterGrid(
            bands=RGB_BANDS,
            pixels=mosaic.ms.pixels[rgb_idx],
            valid=mosaic.ms.valid,
            pixel_size=mosaic.ms.pixel_size,
            origin=mosaic.ms.origin,
        )
        sharp = pansharpen(ms_rgb, mosaic.pan)
        fill_pan = np.kron(mosaic.fill, np.ones((2, 2), dtype=np.int16))
        fill_pan[~sharp.valid] = -1
        grid, fill = _fit_to_tile(sharp, fill_pan, tile_size)
    else:
        bounds = aoi.bounds()
        grid = RasterGrid(
            bands=RGB_BANDS,
            pixels=np.zeros((3, tile_size, tile_size), dtype=np.float32),
            valid=np.zeros((tile_size, tile_size), dtype=bool),
            pixel_size=aoi.side / tile_size,
            origin=(bounds[0], bounds[3]),
        )
        fill = np.full((tile_size, tile_size), -1, dtype=np.int16)
    tile = CompositeTile(village_id=aoi.village_id, year=year, grid=grid, fill_report=fill)
    if tile.gap_fraction >= 1.0:
        log.warning("village %s year %s: composite is 100%% gap (%d scenes, %d usable)",
                    aoi.village_id, year, len(scenes), len(kept))
    return tile
