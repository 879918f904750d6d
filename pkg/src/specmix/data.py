"""Cube and endmember ingestion, band removal, preprocessing and the
synthetic scene generator.

HSC raster layout (all little-endian)::

    offset  size  field
    0       4     magic b"HSC1"
    4       4     u32 height
    8       4     u32 width
    12      4     u32 bands
    16      4     u32 flags  (bit 0: wavelength trailer, bit 1: band-index trailer)
    20      12    reserved, zero
    32      ...   height*width*bands float32, band-interleaved-by-pixel
    ...           optional: bands float32 wavelengths, then bands u32 band indices
"""
from __future__ import annotations

import csv
import io
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from specmix.errors import FormatError, ParameterError

MAGIC = b"HSC1"
HEADER = struct.Struct("<4s4I12x")
FLAG_WAVELENGTHS = 1
FLAG_BAND_INDEX = 2
MAX_ELEMENTS = 1 << 33

# 1-based inclusive band ranges removed for water vapour / atmospheric effects
BAND_PRESETS = {
    "urban": [(1, 4), (76, 76), (87, 87), (101, 111), (136, 153), (198, 210)],
    "jasper": [(1, 3), (108, 112), (154, 166), (220, 224)],
    "none": [],
}


@dataclass
class SpectralCube:
    """``H x W x D`` reflectances (float64 in memory)."""

    data: np.ndarray
    wavelengths: np.ndarray | None = None
    band_mask: np.ndarray | None = None  # original 0-based indices of kept bands

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise FormatError(f"cube must be H x W x D, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise FormatError("cube has non-finite reflectances")
        if self.band_mask is None:
            self.band_mask = np.arange(self.bands)
        if self.wavelengths is not None:
            self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    def pixels(self) -> np.ndarray:
        return self.data.reshape(-1, self.bands)


@dataclass
class GroundTruth:
    abundances: np.ndarray  # H x W x K
    endmembers: np.ndarray  # K x D


# ---------------------------------------------------------------------------
# HSC files
# ---------------------------------------------------------------------------
def save_cube(cube: SpectralCube, path) -> None:
    flags = 0
    trailer = b""
    if cube.wavelengths is not None:
        flags |= FLAG_WAVELENGTHS
        trailer += np.asarray(cube.wavelengths, dtype="<f4").tobytes()
    band_mask = np.asarray(cube.band_mask)
    if not np.array_equal(band_mask, np.arange(cube.bands)):
        flags |= FLAG_BAND_INDEX
        trailer += band_mask.astype("<u4").tobytes()
    header = HEADER.pack(MAGIC, cube.height, cube.width, cube.bands, flags)
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload + trailer)


def load_cube(path) -> SpectralCube:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(
            f"file holds {len(raw)} bytes, header needs {HEADER.size}", offset=len(raw)
        )
    magic, h, w, d, flags = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    count = h * w * d
    if count == 0 or count > MAX_ELEMENTS:
        raise FormatError(f"implausible shape {h} x {w} x {d}", offset=4)
    expected = HEADER.size + 4 * count
    if flags & FLAG_WAVELENGTHS:
        expected += 4 * d
    if flags & FLAG_BAND_INDEX:
        expected += 4 * d
    if len(raw) < expected:
        raise FormatError(
            f"truncated file: expected {expected} bytes, found {len(raw)}", offset=len(raw)
        )
    pos = HEADER.size
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(h, w, d)
    pos += 4 * count
    wavelengths = None
    band_mask = None
    if flags & FLAG_WAVELENGTHS:
        wavelengths = np.frombuffer(raw, dtype="<f4", count=d, offset=pos).astype(np.float64)
        pos += 4 * d
    if flags & FLAG_BAND_INDEX:
        band_mask = np.frombuffer(raw, dtype="<u4", count=d, offset=pos).astype(np.int64)
    if not np.isfinite(data).all():
        bad = int(np.argmin(np.isfinite(data).reshape(-1)))
        raise FormatError("non-finite reflectance", offset=HEADER.size + 4 * bad)
    return SpectralCube(data.astype(np.float64), wavelengths, band_mask)


# ---------------------------------------------------------------------------
# Band removal
# ---------------------------------------------------------------------------
def parse_band_ranges(value) -> list[tuple[int, int]]:
    """Accept a preset name, ``"1-4,76,101-111"`` or a list of ranges."""
    if value is None:
        return []
    if isinstance(value, str):
        key = value.strip().lower()
        if key in BAND_PRESETS:
            return list(BAND_PRESETS[key])
        ranges = []
        for part in filter(None, (p.strip() for p in key.split(","))):
            lo, _, hi = part.partition("-")
            try:
                ranges.append((int(lo), int(hi or lo)))
            except ValueError:
                raise ParameterError(f"cannot parse band range '{part}'") from None
        return ranges
    out = []
    for item in value:
        if isinstance(item, (int, np.integer)):
            out.append((int(item), int(item)))
        else:
            lo, hi = item
            out.append((int(lo), int(hi)))
    return out


def removal_indices(ranges, bands: int) -> np.ndarray:
    drop = set()
    for lo, hi in ranges:
        if lo < 1 or hi > bands or lo > hi:
            raise ParameterError(f"band range {lo}-{hi} invalid for {bands} bands")
        drop.update(range(lo - 1, hi))
    return np.array(sorted(drop), dtype=np.int64)


def remove_bands(cube: SpectralCube, removal) -> SpectralCube:
    ranges = parse_band_ranges(removal)
    drop = removal_indices(ranges, cube.bands)
    keep = np.setdiff1d(np.arange(cube.bands), drop)
    wl = None if cube.wavelengths is None else cube.wavelengths[keep]
    return SpectralCube(cube.data[:, :, keep], wl, np.asarray(cube.band_mask)[keep])


def remove_endmember_bands(endmembers: np.ndarray, removal) -> np.ndarray:
    e = np.asarray(endmembers)
    drop = removal_indices(parse_band_ranges(removal), e.shape[1])
    return e[:, np.setdiff1d(np.arange(e.shape[1]), drop)]


# ---------------------------------------------------------------------------
# Endmember CSV
# ---------------------------------------------------------------------------
def load_endmembers(path) -> np.ndarray:
    """K rows of D comma-separated nonnegative reflectances."""
    text = Path(path).read_text()
    rows = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            rows.append([float(c) for c in row])
        except ValueError:
            raise FormatError(f"non-numeric value on line {lineno} of {path}") from None
        if len(rows[-1]) != len(rows[0]):
            raise FormatError(
                f"ragged endmember file: line {lineno} has {len(rows[-1])} values, "
                f"expected {len(rows[0])}"
            )
    if not rows:
        raise FormatError(f"no endmembers in {path}")
    e = np.array(rows, dtype=np.float64)
    if not np.isfinite(e).all():
        raise FormatError("endmember file has non-finite values")
    if np.any(e < 0):
        raise FormatError("endmember file has negative reflectances")
    zero = np.flatnonzero(~e.any(axis=1))
    if zero.size:
        raise FormatError(f"endmember row {int(zero[0]) + 1} is all zeros")
    return e


def save_endmembers(endmembers, path) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in np.asarray(endmembers)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Synthetic scene
# ---------------------------------------------------------------------------
@dataclass
class SceneParams:
    height: int = 60
    width: int = 60
    materials: int = 4
    bands: int = 200
    blob_count: int = 5
    blob_sigma: float = 6.0
    blob_peak: float = 0.9
    noise_snr: float = 30.0  # dB; math.inf disables noise


def smooth_spectra(rng: np.random.Generator, materials: int, bands: int) -> np.ndarray:
    """Random smooth reflectance curves: a baseline plus Gaussian bumps and dips."""
    grid = np.linspace(0.0, 1.0, bands)
    out = np.empty((materials, bands))
    for k in range(materials):
        curve = np.full(bands, rng.uniform(0.15, 0.45))
        curve += rng.uniform(-0.15, 0.15) * grid
        for _ in range(rng.integers(3, 6)):
            centre = rng.uniform(0.0, 1.0)
            width = rng.uniform(0.04, 0.2)
            amp = rng.uniform(-0.15, 0.35)
            curve += amp * np.exp(-0.5 * ((grid - centre) / width) ** 2)
        out[k] = np.clip(curve, 0.02, 1.0)
    return out


def synthesize_scene(seed: int, params: SceneParams | None = None, endmembers=None):
    """Background material everywhere plus Gaussian blobs of the others.

    Material 0 is the background with raw weight 1 at every pixel; every
    other material adds ``blob_count`` Gaussian blobs at random centres.
    Raw weights are normalized onto the simplex, pixels are mixed linearly
    and white noise at ``noise_snr`` dB is added.
    """
    params = params or SceneParams()
    if params.materials < 2:
        raise ParameterError("synthetic scene needs at least 2 materials")
    rng = np.random.default_rng(seed)
    if endmembers is None:
        e = smooth_spectra(rng, params.materials, params.bands)
    else:
        e = np.asarray(endmembers, dtype=np.float64)
        if e.shape != (params.materials, params.bands):
            raise ParameterError(
                f"endmember library shape {e.shape} != ({params.materials}, {params.bands})"
            )
    h, w = params.height, params.width
    rows, cols = np.mgrid[0:h, 0:w]
    weights = np.zeros((h, w, params.materials))
    weights[:, :, 0] = 1.0
    for k in range(1, params.materials):
        for _ in range(params.blob_count):
            r0, c0 = rng.uniform(0, h), rng.uniform(0, w)
            d2 = (rows - r0) ** 2 + (cols - c0) ** 2
            weights[:, :, k] += params.blob_peak * np.exp(-0.5 * d2 / params.blob_sigma**2)
    abund = weights / weights.sum(axis=2, keepdims=True)
    clean = abund @ e
    if math.isinf(params.noise_snr):
        data = clean
    else:
        power = np.mean(clean**2)
        sigma = math.sqrt(power / 10 ** (params.noise_snr / 10))
        data = clean + rng.normal(0.0, sigma, size=clean.shape)
    wavelengths = np.linspace(0.4, 14.0, params.bands)
    return SpectralCube(data, wavelengths), GroundTruth(abund, e)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------
@dataclass
class PixelSet:
    """Flattened pixels with their l1-normalized versions."""

    raw: np.ndarray  # P x D
    normalized: np.ndarray  # P x D, rows sum to one
    norms: np.ndarray  # P, the divisor of each row
    index: np.ndarray  # P, flat position in the source cube
    shape: tuple  # (H, W) of the source
    skipped: int = 0

    def __len__(self):
        return self.raw.shape[0]

    @property
    def bands(self) -> int:
        return self.raw.shape[1]

    def epoch(self, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
        """One shuffled pass; a trailing batch of one is merged into the previous."""
        order = rng.permutation(len(self))
        batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
        if len(batches) > 1 and len(batches[-1]) < 2:
            tail = batches.pop()
            batches[-1] = np.concatenate([batches[-1], tail])
        return batches

    def batches(self, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
        while True:
            yield from self.epoch(batch_size, rng)


def preprocess(cube: SpectralCube) -> PixelSet:
    """Flatten pixels and scale each to unit band sum.

    For reflectances the band sum is the l1 norm; noise can push single
    bands slightly negative, and dividing by the plain sum keeps every row
    summing to one regardless. Pixels with a non-positive sum are skipped.
    """
    pix = cube.pixels()
    norms = pix.sum(axis=1)
    keep = norms > 0
    skipped = int((~keep).sum())
    if skipped:
        warnings.warn(f"skipped {skipped} pixel(s) with zero or negative band sum", stacklevel=2)
    raw = pix[keep]
    return PixelSet(
        raw=raw,
        normalized=raw / norms[keep, None],
        norms=norms[keep],
        index=np.flatnonzero(keep),
        shape=(cube.height, cube.width),
        skipped=skipped,
    )


def pixels_to_map(values: np.ndarray, pixels: PixelSet, fill: float = 0.0) -> np.ndarray:
    """Scatter per-pixel rows back into an ``H x W x C`` array."""
    h, w = pixels.shape
    out = np.full((h * w, values.shape[1]), fill)
    out[pixels.index] = values
    return out.reshape(h, w, values.shape[1])
