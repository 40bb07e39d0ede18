"""Samples, raster tiling, IDW ground truth, splitting, synthetic scenes and file I/O.

Geospatial convention: rasters are north-up, ``origin`` is the (easting,
northing) of the upper-left corner, columns increase easting and rows
decrease northing. A tile's ``tile_origin`` is its own upper-left corner.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"WSED"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_SAMPLE_HEAD = struct.Struct("<I")
_SAMPLE_TAIL = struct.Struct("<dddd")
_CRC = struct.Struct("<I")

SANITY_BAND_M = 5.0


class DatasetError(Exception):
    pass


class FormatError(DatasetError):
    """Bad magic bytes or unsupported version."""


class TruncatedFileError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


@dataclass
class Sample:
    ortho: np.ndarray  # 3 x N x N, values in [0, 1]
    dsm: np.ndarray  # N x N, metres MSL
    wse: float = math.nan
    tile_origin: tuple = (0.0, 0.0)
    tile_size_m: float = 10.0

    def __post_init__(self):
        self.ortho = np.ascontiguousarray(self.ortho, dtype=np.float32)
        self.dsm = np.ascontiguousarray(self.dsm, dtype=np.float32)
        n = self.dsm.shape[0]
        if self.dsm.shape != (n, n) or self.ortho.shape != (3, n, n):
            raise DatasetError(f"ortho {self.ortho.shape} and dsm {self.dsm.shape} must be 3xNxN and NxN")
        self.tile_origin = (float(self.tile_origin[0]), float(self.tile_origin[1]))
        self.wse = float(self.wse)
        if not math.isnan(self.wse):
            lo, hi = float(self.dsm.min()) - SANITY_BAND_M, float(self.dsm.max()) + SANITY_BAND_M
            if not lo <= self.wse <= hi:
                raise DatasetError(f"wse {self.wse} outside sanity band [{lo}, {hi}]")

    @property
    def size_px(self) -> int:
        return self.dsm.shape[0]

    @property
    def center(self) -> tuple:
        e, n = self.tile_origin
        half = self.tile_size_m / 2.0
        return (e + half, n - half)


@dataclass(frozen=True)
class WsePoint:
    easting: float
    northing: float
    wse: float

    def __post_init__(self):
        if not (math.isfinite(self.easting) and math.isfinite(self.northing) and math.isfinite(self.wse)):
            raise DatasetError(f"non-finite WSE point {self}")


# ---------------------------------------------------------------------------
# tiling and ground truth


def tile_rasters(ortho_raster, dsm_raster, origin, px_size_m: float, tile_px: int) -> list[Sample]:
    """Cut co-registered rasters into a non-overlapping grid of square tiles.

    Remainder rows/columns on the right and bottom edges are dropped. Tiles
    are returned row-major (north to south, west to east); ``wse`` is unset.
    """
    ortho_raster = np.asarray(ortho_raster)
    dsm_raster = np.asarray(dsm_raster)
    if px_size_m <= 0:
        raise DatasetError("px_size_m must be positive")
    if tile_px <= 0:
        raise DatasetError("tile_px must be positive")
    if dsm_raster.ndim != 2 or ortho_raster.shape != (3,) + dsm_raster.shape:
        raise DatasetError(f"ortho {ortho_raster.shape} does not match dsm {dsm_raster.shape}")
    h, w = dsm_raster.shape
    if h < tile_px or w < tile_px:
        raise DatasetError(f"raster {h}x{w} smaller than one {tile_px}px tile")
    e0, n0 = float(origin[0]), float(origin[1])
    step = tile_px * px_size_m
    tiles = []
    for row in range(h // tile_px):
        for col in range(w // tile_px):
            r, c = row * tile_px, col * tile_px
            tiles.append(Sample(
                ortho=ortho_raster[:, r:r + tile_px, c:c + tile_px],
                dsm=dsm_raster[r:r + tile_px, c:c + tile_px],
                tile_origin=(e0 + col * step, n0 - row * step),
                tile_size_m=step,
            ))
    return tiles


def idw_interpolate(points: Sequence[WsePoint], query, power: float = 2.0) -> float:
    """Inverse-distance-weighted WSE at ``query`` using all points.

    A query closer than 1e-9 m to a point returns that point's value.
    """
    if len(points) == 0:
        raise DatasetError("IDW needs at least one point")
    if power <= 0:
        raise DatasetError("IDW power must be positive")
    xy = np.array([(p.easting, p.northing) for p in points], dtype=np.float64)
    val = np.array([p.wse for p in points], dtype=np.float64)
    d = np.hypot(xy[:, 0] - query[0], xy[:, 1] - query[1])
    hit = np.flatnonzero(d < 1e-9)
    if hit.size:
        return float(val[hit[0]])
    # scale by the nearest distance so d**-power cannot overflow/underflow
    w = (d / d.min()) ** (-power)
    return float(np.dot(w, val) / w.sum())


def assign_wse(samples: Sequence[Sample], points: Sequence[WsePoint], power: float = 2.0) -> list[Sample]:
    """Set each sample's wse to the IDW estimate at its tile centre (in place; returns the list)."""
    if len(points) == 0:
        raise DatasetError("assign_wse needs at least one point")
    for s in samples:
        s.wse = idw_interpolate(points, s.center, power)
    return list(samples)


def split_dataset(samples, ratio=(8, 2), seed: int = 0) -> tuple[list[int], list[int]]:
    """Seeded shuffle into train/test ids; train size is round-half-up of n * share."""
    n = samples if isinstance(samples, int) else len(samples)
    if n < 2:
        raise DatasetError("need at least 2 samples to split")
    a, b = ratio
    if a <= 0 or b <= 0:
        raise DatasetError("ratio parts must be positive")
    n_train = int(math.floor(n * a / (a + b) + 0.5))
    n_train = min(max(n_train, 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    return sorted(order[:n_train].tolist()), sorted(order[n_train:].tolist())


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic river-tile generator.

    Each tile holds one straight river strip at a random angle. Water DSM
    pixels sit at or below the true WSE (``bias_m`` models the
    below-surface returns of photogrammetric DSMs) plus uniform noise in
    ``[-noise_m, noise_m]``.
    """

    n: int = 64
    tile_px: int = 32
    tile_size_m: float = 10.0
    noise_m: float = 0.05
    bias_m: float = 0.3
    altitude_range: tuple = (198.0, 202.0)
    bank_height_range: tuple = (0.2, 1.5)
    width_range: tuple = (0.2, 0.5)  # river width as a fraction of the tile side
    land_slope_m: float = 1.5  # max rise from bank to the far tile edge
    bump_m: float = 0.2

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be non-negative")
        if self.tile_px < 2:
            raise ValueError("tile_px must be at least 2")
        if self.noise_m < 0 or self.bias_m < 0:
            raise ValueError("noise_m and bias_m must be non-negative")


def _smooth_field(rng, n, coarse=4):
    """Bilinear upsampling of a coarse uniform grid: a smooth field in [0, 1]."""
    g = rng.uniform(0.0, 1.0, size=(coarse, coarse))
    t = np.linspace(0, coarse - 1, n)
    i0 = np.minimum(np.floor(t).astype(int), coarse - 2)
    f = t - i0
    rows = g[i0] * (1 - f)[:, None] + g[i0 + 1] * f[:, None]
    return rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]


def synthetic_scene(cfg: SynthConfig, rng: np.random.Generator, origin=(0.0, 0.0)) -> tuple[Sample, np.ndarray]:
    """One synthetic tile and its boolean water mask."""
    n = cfg.tile_px
    # WSE representable in float32 so noiseless water pixels equal it exactly
    wse = float(np.float32(rng.uniform(*cfg.altitude_range)))
    bank = rng.uniform(*cfg.bank_height_range)
    half_width = 0.5 * rng.uniform(*cfg.width_range)
    theta = rng.uniform(0.0, math.pi)
    offset = rng.uniform(-0.25, 0.25)
    coords = (np.arange(n) + 0.5) / n - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dist = np.abs(xx * math.cos(theta) + yy * math.sin(theta) - offset)
    water = dist < half_width

    land = wse + bank + cfg.land_slope_m * rng.uniform() * (dist - half_width) + cfg.bump_m * _smooth_field(rng, n)
    depth = np.clip(1.0 - dist / half_width, 0.0, 1.0)
    below = cfg.bias_m * depth * _smooth_field(rng, n)
    noise = rng.uniform(-cfg.noise_m, cfg.noise_m, size=(n, n)) if cfg.noise_m > 0 else 0.0
    water_z = wse - below + noise
    dsm = np.where(water, water_z, land).astype(np.float32)
    # float32 rounding could nudge a water pixel past the contract bound
    dsm = np.where(water, np.minimum(dsm, np.float32(wse + cfg.noise_m)), dsm)

    land_rgb = np.array([0.36, 0.45, 0.24])[:, None, None] + rng.normal(0.0, 0.08, size=(3, n, n))
    water_rgb = np.array([0.14, 0.19, 0.22])[:, None, None] + rng.normal(0.0, 0.01, size=(3, n, n))
    ortho = np.clip(np.where(water[None], water_rgb, land_rgb), 0.0, 1.0)
    sample = Sample(ortho=ortho, dsm=dsm, wse=wse, tile_origin=origin, tile_size_m=cfg.tile_size_m)
    return sample, water


def generate_synthetic(cfg: SynthConfig, seed: int = 0) -> list[Sample]:
    """Deterministic list of ``cfg.n`` synthetic tiles laid out west to east."""
    rng = np.random.default_rng(seed)
    return [synthetic_scene(cfg, rng, origin=(i * cfg.tile_size_m, 0.0))[0] for i in range(cfg.n)]


# ---------------------------------------------------------------------------
# container format


def _encode(samples: Sequence[Sample]) -> bytes:
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(samples))]
    for s in samples:
        parts.append(_SAMPLE_HEAD.pack(s.size_px))
        parts.append(np.ascontiguousarray(s.ortho, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.dsm, dtype="<f4").tobytes())
        parts.append(_SAMPLE_TAIL.pack(s.wse, s.tile_origin[0], s.tile_origin[1], s.tile_size_m))
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def _decode(data: bytes) -> list[Sample]:
    if len(data) < _HEADER.size + _CRC.size:
        raise TruncatedFileError("file shorter than header + checksum")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    body, (crc,) = data[:-_CRC.size], _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(body) != crc:
        raise ChecksumError("CRC32 mismatch")
    pos = _HEADER.size
    out = []
    for _ in range(count):
        if pos + _SAMPLE_HEAD.size > len(body):
            raise TruncatedFileError("sample header past end of payload")
        (n,) = _SAMPLE_HEAD.unpack_from(body, pos)
        pos += _SAMPLE_HEAD.size
        need = 4 * 4 * n * n + _SAMPLE_TAIL.size
        if pos + need > len(body):
            raise TruncatedFileError("sample payload past end of file")
        ortho = np.frombuffer(body, dtype="<f4", count=3 * n * n, offset=pos).reshape(3, n, n)
        pos += 12 * n * n
        dsm = np.frombuffer(body, dtype="<f4", count=n * n, offset=pos).reshape(n, n)
        pos += 4 * n * n
        wse, e, nn, size = _SAMPLE_TAIL.unpack_from(body, pos)
        pos += _SAMPLE_TAIL.size
        s = Sample.__new__(Sample)  # skip sanity checks: file content is authoritative
        s.ortho, s.dsm = ortho.astype(np.float32), dsm.astype(np.float32)
        s.wse, s.tile_origin, s.tile_size_m = wse, (e, nn), size
        out.append(s)
    if pos != len(body):
        raise FormatError(f"{len(body) - pos} trailing bytes after last sample")
    return out


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


@dataclass
class DatasetManifest:
    count: int
    train_ids: list
    test_ids: list
    dsm_sigma: float
    seed: int | None = None
    split_ratio: tuple = (8, 2)
    sigma_scope: str = "train"
    generator: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "count": self.count,
            "split_ratio": list(self.split_ratio),
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
            "dsm_sigma": self.dsm_sigma,
            "sigma_scope": self.sigma_scope,
            "seed": self.seed,
            "generator": self.generator,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        if d.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported manifest version {d.get('format_version')}")
        return cls(count=d["count"], train_ids=list(d["train_ids"]), test_ids=list(d["test_ids"]),
                   dsm_sigma=float(d["dsm_sigma"]), seed=d.get("seed"),
                   split_ratio=tuple(d.get("split_ratio", (8, 2))), sigma_scope=d.get("sigma_scope", "train"),
                   generator=d.get("generator", {}))


def save_samples(path, samples: Sequence[Sample], manifest: DatasetManifest | None = None) -> Path:
    """Write the binary container (and the JSON manifest sidecar if given)."""
    path = Path(path)
    path.write_bytes(_encode(samples))
    if manifest is not None:
        if manifest.count != len(samples):
            raise DatasetError("manifest count does not match number of samples")
        manifest_path(path).write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_samples(path) -> tuple[list[Sample], DatasetManifest | None]:
    """Read a container written by :func:`save_samples`; raises before returning anything partial."""
    path = Path(path)
    samples = _decode(path.read_bytes())
    mpath = manifest_path(path)
    manifest = None
    if mpath.exists():
        manifest = DatasetManifest.from_dict(json.loads(mpath.read_text()))
        if manifest.count != len(samples):
            raise DatasetError(f"manifest lists {manifest.count} samples, file holds {len(samples)}")
    return samples, manifest
