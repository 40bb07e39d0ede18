"""Feature scaling for DSM / orthophoto inputs and inverse WSE recovery."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ConfigurationError(ValueError):
    pass


class InputRangeError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetStats:
    """Dataset-wide scaling constants.

    ``dsm_sigma`` is the standard deviation of DSM pixel values pooled over
    the samples it was computed from (metres).
    """

    dsm_sigma: float
    imagenet_mean: tuple = IMAGENET_MEAN
    imagenet_std: tuple = IMAGENET_STD

    def __post_init__(self):
        if not np.isfinite(self.dsm_sigma) or self.dsm_sigma <= 0:
            raise ConfigurationError(f"dsm_sigma must be positive, got {self.dsm_sigma}")
        if len(self.imagenet_mean) != 3 or len(self.imagenet_std) != 3:
            raise ConfigurationError("orthophoto statistics must be 3-vectors")
        if min(self.imagenet_std) <= 0:
            raise ConfigurationError("orthophoto std must be positive")


def compute_dsm_sigma(dsms: Sequence[np.ndarray]) -> float:
    """Pooled standard deviation of all pixels of ``dsms`` (float64 accumulation)."""
    if len(dsms) == 0:
        raise ConfigurationError("cannot compute dsm_sigma from zero tiles")
    flat = np.concatenate([np.asarray(d, dtype=np.float64).ravel() for d in dsms])
    return float(flat.std())


def standardize_dsm(dsm, stats: DatasetStats) -> tuple[np.ndarray, float]:
    """Return ``((dsm - mean(dsm)) / (2 * sigma), mean(dsm))``.

    Subtracting the tile's own mean makes the output independent of the
    tile's absolute altitude; the mean is returned so the absolute WSE can
    be recovered with :func:`destandardize_wse`.
    """
    if stats.dsm_sigma <= 0:
        raise ConfigurationError(f"dsm_sigma must be positive, got {stats.dsm_sigma}")
    d = np.asarray(dsm, dtype=np.float64)
    if d.size == 0:
        raise InputRangeError("empty DSM")
    if not np.isfinite(d).all():
        raise InputRangeError("DSM contains non-finite values")
    mean = float(d.mean())
    return ((d - mean) / (2.0 * stats.dsm_sigma)).astype(np.float32), mean


def standardize_wse(wse: float, dsm_mean: float, stats: DatasetStats) -> float:
    """Regression target for a tile: WSE in the tile's standardized units."""
    return (wse - dsm_mean) / (2.0 * stats.dsm_sigma)


def destandardize_wse(pred, dsm_mean, stats: DatasetStats):
    """Map a standardized prediction back to metres MSL. Works on scalars or arrays."""
    out = np.asarray(pred, dtype=np.float64) * (2.0 * stats.dsm_sigma) + np.asarray(dsm_mean, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def standardize_ortho(rgb, stats: DatasetStats) -> np.ndarray:
    """Per-channel ``(x - mean_c) / std_c`` for a 3xHxW image with values in [0, 1]."""
    x = np.asarray(rgb, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise InputRangeError(f"orthophoto must be 3xHxW, got shape {x.shape}")
    if not np.isfinite(x).all() or x.min() < 0.0 or x.max() > 1.0:
        raise InputRangeError("orthophoto values must lie in [0, 1]")
    mu = np.asarray(stats.imagenet_mean, dtype=np.float64)[:, None, None]
    sd = np.asarray(stats.imagenet_std, dtype=np.float64)[:, None, None]
    return ((x - mu) / sd).astype(np.float32)


def destandardize_ortho(x, stats: DatasetStats) -> np.ndarray:
    mu = np.asarray(stats.imagenet_mean, dtype=np.float64)[:, None, None]
    sd = np.asarray(stats.imagenet_std, dtype=np.float64)[:, None, None]
    return np.asarray(x, dtype=np.float64) * sd + mu


@dataclass
class PreparedSet:
    """Model-ready view of a list of samples.

    ``x`` stacks the standardized DSM as channel 0 and the standardized RGB
    orthophoto as channels 1-3.
    """

    x: np.ndarray
    target: np.ndarray
    dsm_mean: np.ndarray
    wse: np.ndarray
    stats: DatasetStats
    ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return self.x.shape[0]

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "PreparedSet":
        idx = np.asarray(idx, dtype=np.int64)
        return PreparedSet(self.x[idx], self.target[idx], self.dsm_mean[idx], self.wse[idx],
                           self.stats, self.ids[idx])


def prepare_samples(samples, stats: DatasetStats, ids=None) -> PreparedSet:
    """Scale every sample and stack DSM + RGB into 4-channel inputs."""
    xs, targets, means, wses = [], [], [], []
    for s in samples:
        dsm, mean = standardize_dsm(s.dsm, stats)
        ortho = standardize_ortho(s.ortho, stats)
        xs.append(np.concatenate([dsm[None], ortho], axis=0))
        means.append(mean)
        wses.append(s.wse)
        targets.append(standardize_wse(s.wse, mean, stats))
    if ids is None:
        ids = np.arange(len(xs))
    if not xs:
        return PreparedSet(np.zeros((0, 4, 1, 1), np.float32), np.zeros(0, np.float32),
                           np.zeros(0), np.zeros(0), stats, np.zeros(0, np.int64))
    return PreparedSet(
        x=np.stack(xs).astype(np.float32),
        target=np.asarray(targets, dtype=np.float32),
        dsm_mean=np.asarray(means, dtype=np.float64),
        wse=np.asarray(wses, dtype=np.float64),
        stats=stats,
        ids=np.asarray(ids, dtype=np.int64),
    )
