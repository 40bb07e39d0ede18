"""Error metrics in metres on destandardized WSE predictions."""

from __future__ import annotations

import math

import numpy as np

from .preprocess import PreparedSet, destandardize_wse
from .tensor import predict


def predict_wse(model, data: PreparedSet) -> np.ndarray:
    """Absolute WSE predictions (m MSL) for every sample of ``data``."""
    if len(data) == 0:
        return np.zeros(0)
    return np.asarray(destandardize_wse(predict(model, data.x), data.dsm_mean, data.stats), dtype=np.float64)


def rmse(pred, truth) -> float:
    resid = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    if resid.size == 0:
        return math.nan
    return float(np.sqrt(np.mean(resid ** 2)))


def mae(pred, truth) -> float:
    resid = np.asarray(pred, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    if resid.size == 0:
        return math.nan
    return float(np.mean(np.abs(resid)))


def rmse_m(model, data: PreparedSet) -> float:
    return rmse(predict_wse(model, data), data.wse)
