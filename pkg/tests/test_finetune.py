import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wsevo.finetune import FinetuneConfig, finetune, perturb_weights, selection_count, write_history_csv
from wsevo.genome import instantiate, vgg_genome
from wsevo.metrics import rmse_m
from wsevo.preprocess import DatasetStats, PreparedSet
from wsevo.tensor import FullyConnected, Model, TrainConfig, train


def vec_model(values):
    """A model whose single weight tensor is exactly ``values`` (bias tensor fixed at 1)."""
    values = np.asarray(values, np.float32)
    m = Model.build([FullyConnected(values.size, 1)], (values.size,), rng=0)
    return m.with_params([values.reshape(1, -1), np.ones(1, np.float32)])


def test_one_of_three_moves_by_half():
    theta = np.array([1.0, -2.0, 4.0])
    out = perturb_weights(vec_model(theta), FinetuneConfig(percentage=1 / 3, scale=8), np.random.default_rng(0))
    diff = out.params[0].ravel() - theta
    assert np.count_nonzero(diff) == 1
    assert abs(diff[diff != 0][0]) == 0.5


def test_full_percentage_unit_scale():
    rng = np.random.default_rng(1)
    for _ in range(10):
        out = perturb_weights(vec_model([1.0, 1.0]), FinetuneConfig(percentage=1.0, scale=1.0), rng)
        assert set(out.params[0].ravel().tolist()) <= {0.0, 2.0}


def test_vanishing_scale():
    m = vec_model(np.random.default_rng(2).standard_normal(20))
    out = perturb_weights(m, FinetuneConfig(percentage=0.5, scale=1e12), np.random.default_rng(0))
    for a, b in zip(m.params, out.params):
        assert np.max(np.abs(a.astype(np.float64) - b)) <= 1e-11


def test_zero_tensor_untouched():
    m = vec_model([0.0, 0.0, 0.0])
    out = perturb_weights(m, FinetuneConfig(percentage=1.0), np.random.default_rng(0))
    assert np.all(out.params[0] == 0)


def test_mask_redrawn_each_call():
    m = vec_model(np.arange(1, 101, dtype=np.float32))
    rng = np.random.default_rng(3)
    masks = {tuple(np.flatnonzero(perturb_weights(m, FinetuneConfig(), rng).params[0].ravel() != m.params[0].ravel()))
             for _ in range(5)}
    assert len(masks) == 5


@pytest.mark.parametrize("size,pct,expected", [(3, 1 / 3, 1), (10, 0.1, 1), (10, 0.25, 3), (5, 0.01, 1),
                                               (4, 1.0, 4), (20, 0.125, 3)])
def test_selection_count_rounding(size, pct, expected):
    assert selection_count(size, pct) == expected


@given(st.integers(1, 200), st.floats(0.01, 1.0), st.floats(1.0, 1000.0), st.integers(0, 2**32 - 1))
def test_exact_count_and_magnitude(size, pct, scale, seed):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-3, 3, size).astype(np.float32)
    m = vec_model(theta)
    out = perturb_weights(m, FinetuneConfig(percentage=pct, scale=scale), rng)
    for before, after in zip(m.params, out.params):
        changed = np.flatnonzero(before.ravel() != after.ravel())
        step = float(np.max(np.abs(before.astype(np.float64)))) / scale
        # an entry can only stay put if the step vanishes below its ulp
        assert len(changed) <= selection_count(before.size, pct)
        delta = np.abs(after.ravel()[changed].astype(np.float64) - before.ravel()[changed])
        ulp = np.spacing(np.maximum(np.abs(after.ravel()[changed]), np.abs(before.ravel()[changed])))
        assert np.all(np.abs(delta - step) <= ulp)
        if step > np.spacing(np.float32(3.0)):
            assert len(changed) == selection_count(before.size, pct)


@pytest.mark.parametrize("kw", [dict(percentage=0.0), dict(percentage=1.5), dict(scale=0.0),
                                dict(population_size=0), dict(generations=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        FinetuneConfig(**kw)


def _trained(tiny_split, gid=4):
    train_set, _ = tiny_split
    m = instantiate(vgg_genome((4,), num_convs=1, id=gid), train_set.input_shape)
    return train(m, train_set, TrainConfig(learning_rate=0.01, epochs=2, batch_size=4, seed=gid))


def test_zero_generations_returns_input(tiny_split):
    m = _trained(tiny_split)
    out, hist = finetune(m, *tiny_split, FinetuneConfig(generations=0))
    assert out is m and hist == []


def test_history_non_increasing_and_never_worse(tiny_split, tmp_path):
    train_set, val_set = tiny_split
    m = _trained(tiny_split)
    out, hist = finetune(m, train_set, val_set, FinetuneConfig(generations=6, population_size=4, seed=1))
    best = [h.best_rmse for h in hist]
    assert len(hist) == 6
    assert all(b <= a for a, b in zip(best, best[1:]))
    assert rmse_m(out, val_set) <= rmse_m(m, val_set)
    assert best[-1] == pytest.approx(rmse_m(out, val_set), rel=1e-12)
    write_history_csv(tmp_path / "h.csv", hist)
    rows = list(csv.DictReader(open(tmp_path / "h.csv")))
    assert len(rows) == 6 and float(rows[-1]["best_rmse"]) == best[-1]


def test_deterministic_from_seed(tiny_split):
    m = _trained(tiny_split)
    cfg = FinetuneConfig(generations=3, population_size=3, seed=9)
    a, _ = finetune(m, *tiny_split, cfg)
    b, _ = finetune(m, *tiny_split, cfg)
    assert all(p.tobytes() == q.tobytes() for p, q in zip(a.params, b.params))


def test_one_parameter_convex_case():
    # prediction = w * 1; target fixed at 0.5 -> rmse is |w - 0.5| scaled; convex in w
    stats = DatasetStats(1.0)
    x = np.ones((4, 1), np.float32)
    val = PreparedSet(x, np.full(4, 0.5, np.float32), np.full(4, 200.0), np.full(4, 201.0), stats,
                      np.arange(4))
    start = Model.build([FullyConnected(1, 1)], (1,), rng=0)
    start = start.with_params([np.array([[3.0]], np.float32), np.zeros(1, np.float32)])
    out, hist = finetune(start, None, val, FinetuneConfig(generations=50, percentage=1.0, scale=10,
                                                          population_size=4, seed=0))
    assert rmse_m(out, val) <= rmse_m(start, val)
    assert rmse_m(out, val) < 0.5 * rmse_m(start, val)
