import csv

import numpy as np
import pytest

from oracles import scalar_mlp
from shiftlab.data import Dataset, NoiseSpec, class_prior_shift_sample, gaussian_classes, inject_label_noise
from shiftlab.diw import (
    DiwConfig,
    batch_weights,
    class_prior_ratio,
    diw_train,
    minibatch_match,
    normalize_mean_one,
    transform_hidden,
    transform_loss_value,
)
from shiftlab.erm import Loss, loss_eval
from shiftlab.errors import BadLayer, ShiftLabError
from shiftlab.nnet import Mlp
from shiftlab.numerics import seeded_rng
from shiftlab.ratio import KmmConfig, kmm_weights

CE = Loss("softmax_ce")


def test_class_prior_ratio_identical_priors():
    y = np.repeat(np.arange(3), [10, 20, 30])
    r = class_prior_ratio(y, y, 3)
    assert np.all(np.abs(r.w_y - 1.0) <= 2.0 / 10)
    assert r.absent == ()


def test_class_prior_ratio_absent_class_is_finite_and_flagged():
    r = class_prior_ratio([0, 0, 1, 1], [0, 1, 2], 3)
    assert np.all(np.isfinite(r.w_y)) and r.w_y[2] > 0
    assert r.absent == (2,)


def test_class_prior_ratio_matches_sampler_oracle():
    rng = seeded_rng(0)
    pool = gaussian_classes(1250, 10, 2, rng)
    train, oracle = class_prior_shift_sample(pool, 0.2, 100.0, 1247, rng)
    valid = gaussian_classes(1000, 10, 2, rng)
    assert abs(train.n - 10_000) <= 30
    r = class_prior_ratio(train.labels, valid.labels, 10)
    np.testing.assert_allclose(r.w_y, oracle, rtol=0.15)


def test_match_identical_batches_gives_ones():
    z = seeded_rng(1).standard_normal((64, 1))
    w = minibatch_match(z, z, DiwConfig(B=10.0, eps=0.01), tol=1e-10, max_iter=20_000)
    np.testing.assert_allclose(w, 1.0, atol=1e-3)


def test_match_bimodal_prefers_near_mode():
    rng = seeded_rng(2)
    near = 0.3 * rng.standard_normal(40)
    far = 5.0 + 0.3 * rng.standard_normal(40)
    z_tr = np.concatenate([near, far])[:, None]
    z_te = 0.3 * rng.standard_normal((80, 1))
    w = minibatch_match(z_tr, z_te, DiwConfig(B=10.0, eps=0.01, bandwidth=0.5))
    # histogram ratio oracle: the far mode has no test mass at all
    assert w[40:].mean() <= 0.1 * w[:40].mean()


def test_match_equals_kmm_on_raw_inputs():
    rng = seeded_rng(3)
    x_tr, x_te = rng.standard_normal((30, 2)), 0.5 + rng.standard_normal((40, 2))
    opts = {"tol": 1e-12, "max_iter": 50_000}
    a = minibatch_match(x_tr, x_te, DiwConfig(B=5.0, eps=0.05, bandwidth=0.8), **opts)
    b = kmm_weights(x_tr, x_te, KmmConfig(B=5.0, eps=0.05, bandwidth=0.8), **opts)
    np.testing.assert_allclose(a, b, atol=1e-8)


@pytest.mark.parametrize("seed", range(5))
def test_match_respects_constraints(seed):
    rng = seeded_rng(10 + seed)
    cfg = DiwConfig(B=3.0, eps=0.02)
    w = minibatch_match(rng.standard_normal((50, 1)), 1.0 + rng.standard_normal((30, 1)), cfg)
    assert np.all(w >= -1e-12) and np.all(w <= cfg.B + 1e-12)
    assert abs(w.mean() - 1.0) <= cfg.eps + 1e-9


def _net(seed, sizes=(2, 5, 3)):
    rng = seeded_rng(seed)
    return Mlp.init(sizes, rng), rng


def test_loss_transform_cases():
    x = np.array([[1.0, 2.0], [0.0, -1.0]])
    perfect = Dataset(x, x @ np.array([0.5, 0.5]))
    f = Mlp([np.array([[0.5], [0.5]])], [np.zeros(1)])
    np.testing.assert_array_equal(transform_loss_value(f, perfect, Loss("squared")), 0.0)

    f, rng = _net(4)
    d = Dataset(rng.standard_normal((6, 2)), rng.integers(0, 3, 6).astype(float), task="multiclass", n_classes=3)
    z = transform_loss_value(f, d, CE)
    assert z.shape == (6, 1)
    assert np.array_equal(z, transform_loss_value(f, d, CE))
    expected = [loss_eval(CE, scalar_mlp(f.weights, f.biases, xi), yi) for xi, yi in zip(d.x, d.labels)]
    np.testing.assert_allclose(z[:, 0], expected, rtol=1e-12)


def test_hidden_transform_cases():
    f, rng = _net(5, (2, 4, 6, 3))
    x = rng.standard_normal((5, 2))
    np.testing.assert_array_equal(transform_hidden(f, x, -1), f(x))
    truncated = Mlp(f.weights[:2], f.biases[:2])
    expected = np.maximum(np.array([scalar_mlp(truncated.weights, truncated.biases, xi) for xi in x]), 0.0)
    np.testing.assert_allclose(transform_hidden(f, x, 1), expected, rtol=1e-12, atol=1e-15)
    zero = Mlp([np.zeros((2, 4)), np.zeros((4, 3))], [np.zeros(4), np.zeros(3)])
    np.testing.assert_array_equal(transform_hidden(zero, x, 0), 0.0)
    with pytest.raises(BadLayer):
        transform_hidden(f, x, 3)


def test_normalize_mean_one():
    w = normalize_mean_one(seeded_rng(6).uniform(0, 5, 37))
    assert abs(w.mean() - 1.0) <= 1e-12
    np.testing.assert_array_equal(normalize_mean_one(np.zeros(3)), 1.0)


def test_hidden_single_class_is_plain_match():
    f, rng = _net(7, (2, 6, 1))
    tr = Dataset(rng.standard_normal((20, 2)), np.zeros(20), task="multiclass", n_classes=1)
    va = Dataset(0.5 + rng.standard_normal((15, 2)), np.zeros(15), task="multiclass", n_classes=1)
    cfg = DiwConfig(transform="hidden", B=10.0, eps=0.01)
    expected = normalize_mean_one(minibatch_match(transform_hidden(f, tr.x, -2), transform_hidden(f, va.x, -2), cfg))
    np.testing.assert_array_equal(batch_weights(f, tr, va, cfg, CE), expected)


def test_batch_weights_have_mean_one():
    f, rng = _net(8)
    tr = gaussian_classes(20, 3, 2, rng)
    va = gaussian_classes(10, 3, 2, rng)
    for transform in ("loss_value", "hidden"):
        w = batch_weights(f, tr, va, DiwConfig(transform=transform), CE)
        assert abs(w.mean() - 1.0) <= 1e-12


def _matched_run():
    rng = seeded_rng(9)
    d = gaussian_classes(100, 3, 2, rng, spread=2.0)
    f = Mlp.init([2, 16, 3], rng)
    cfg = DiwConfig(epochs=5, minibatch=128, lr=1e-2)
    return diw_train(d, d, f, cfg, CE, rng)[1]


def test_matched_domains_mean_weight_one():
    assert abs(_matched_run().mean() - 1.0) <= 1e-9


@pytest.mark.xfail(strict=True, reason="1-D loss-value KMM fits batch-to-batch sampling noise; see decisions ledger")
def test_matched_domains_weights_nearly_uniform():
    assert _matched_run().std() <= 0.3


def test_noise_separation_single_seed(tmp_path):
    rng = seeded_rng(11)
    clean = gaussian_classes(300, 3, 2, rng, spread=2.0)
    noisy, mask = inject_label_noise(clean, NoiseSpec("symmetric_flip", 0.4), 3, rng)
    valid = gaussian_classes(100, 3, 2, rng, spread=2.0)
    f = Mlp.init([2, 16, 3], rng)
    path = tmp_path / "diw.csv"
    cfg = DiwConfig(epochs=20, minibatch=128, lr=1e-2)
    _, w = diw_train(noisy, valid, f, cfg, CE, rng, noise_mask=mask, trace_path=path)
    assert w[mask].mean() < w[~mask].mean()
    rows = list(csv.DictReader(open(path)))
    assert rows[0]["epoch"] == "0" and rows[-1]["valid_accuracy"] != ""


def test_diw_requires_labels():
    f, rng = _net(12)
    d = Dataset(rng.standard_normal((4, 2)))
    with pytest.raises(ShiftLabError):
        diw_train(d, d, f, DiwConfig(), CE, rng)


def test_config_validation():
    with pytest.raises(ValueError):
        DiwConfig(transform="pixels")
    with pytest.raises(ValueError):
        DiwConfig(B=0.0)
    with pytest.raises(ValueError):
        DiwConfig(eps=-1.0)
