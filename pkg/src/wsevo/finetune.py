"""Gradient-free fine-tuning of a trained model by random weight perturbation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .metrics import rmse_m
from .preprocess import PreparedSet
from .tensor import Model, NumericalError


@dataclass(frozen=True)
class FinetuneConfig:
    """``scale`` applies to every tensor unless ``tensor_scales`` overrides it per tensor."""

    generations: int = 20
    percentage: float = 0.1
    scale: float = 50.0
    population_size: int = 8
    seed: int = 0
    tensor_scales: tuple | None = None

    def __post_init__(self):
        if self.generations < 0:
            raise ValueError("generations must be non-negative")
        if not 0.0 < self.percentage <= 1.0:
            raise ValueError(f"percentage must lie in (0, 1], got {self.percentage}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.population_size < 1:
            raise ValueError("population_size must be positive")
        if self.tensor_scales is not None and any(not s > 0 for s in self.tensor_scales):
            raise ValueError("per-tensor scales must be positive")

    def scale_for(self, i: int) -> float:
        return self.scale if self.tensor_scales is None else float(self.tensor_scales[i])


def selection_count(size: int, percentage: float) -> int:
    """Entries perturbed in a tensor of ``size``: round-half-up of the share, at least 1."""
    return min(size, max(1, int(math.floor(percentage * size + 0.5))))


def perturb_weights(model: Model, cfg: FinetuneConfig, rng) -> Model:
    """Return a copy of ``model`` with a fresh random subset of each tensor nudged.

    In every tensor, ``selection_count`` entries chosen without replacement
    move by ``+/- max|tensor| / scale`` with an independent fair-coin sign.
    An all-zero tensor is left as is.
    """
    if not model.params:
        raise ValueError("model has no weight tensors")
    if cfg.tensor_scales is not None and len(cfg.tensor_scales) != len(model.params):
        raise ValueError("tensor_scales length does not match the number of weight tensors")
    out = []
    for i, theta in enumerate(model.params):
        new = theta.copy()
        step = float(np.max(np.abs(theta))) / cfg.scale_for(i)
        k = selection_count(theta.size, cfg.percentage)
        idx = rng.choice(theta.size, size=k, replace=False)
        signs = rng.choice(np.array([-1.0, 1.0]), size=k)
        if step > 0.0:
            flat = new.reshape(-1)
            # add in float64 and round once, so each entry moves by the step to within half an ulp
            flat[idx] = (flat[idx].astype(np.float64) + signs * step).astype(theta.dtype)
        out.append(new)
    return model.with_params(out)


@dataclass
class GenerationStats:
    generation: int
    best_rmse: float
    mean_rmse: float


def _score(model: Model, val: PreparedSet) -> float:
    try:
        err = rmse_m(model, val)
    except NumericalError:
        return math.inf
    return err if math.isfinite(err) else math.inf


def finetune(model: Model, train_set: PreparedSet | None, val_set: PreparedSet,
             cfg: FinetuneConfig) -> tuple[Model, list[GenerationStats]]:
    """Elitist perturbation search on validation RMSE.

    Each generation perturbs ``population_size`` members (round robin over the
    current population), pools children with their parents and keeps the best
    ``population_size``. The starting model stays in the pool until something
    beats it, so the returned model is never worse on ``val_set``.
    ``train_set`` is accepted for interface symmetry and is not used: fitness
    is measured on the validation split.
    """
    if cfg.generations == 0:
        return model, []
    rng = np.random.default_rng(cfg.seed)
    # (rmse, birth order, model): birth order makes ties deterministic and favours the incumbent
    pool = [(_score(model, val_set), 0, model)]
    born = 1
    history = []
    for gen in range(1, cfg.generations + 1):
        children = []
        for j in range(cfg.population_size):
            parent = pool[j % len(pool)][2]
            child = perturb_weights(parent, cfg, rng)
            children.append((_score(child, val_set), born, child))
            born += 1
        pool = sorted(pool + children, key=lambda t: (t[0], t[1]))[:cfg.population_size]
        errs = np.array([t[0] for t in pool])
        finite = errs[np.isfinite(errs)]
        history.append(GenerationStats(gen, float(errs[0]), float(finite.mean()) if finite.size else math.inf))
    return pool[0][2], history


def write_history_csv(path, history: Sequence[GenerationStats]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "best_rmse", "mean_rmse"])
        for h in history:
            w.writerow([h.generation, repr(h.best_rmse), repr(h.mean_rmse)])
