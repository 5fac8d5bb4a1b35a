import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gauss_kernel
from shiftlab.data import Dataset, ShiftedPair, gen_toy_regression
from shiftlab.errors import TaskMismatch, UnsupportedLoss
from shiftlab.erm import (
    LinearPredictor,
    Loss,
    decide,
    flatten_weights,
    irls_tukey_fit,
    iwerm_fit,
    loo_residuals,
    loss_eval,
    predict,
    tukey_loss,
    tukey_weight,
    weighted_krr_fit,
)
from shiftlab.kernels import GaussianBasis, choose_centers, design_matrix
from shiftlab.numerics import seeded_rng

RHO = 4.685


def test_tukey_endpoints():
    t = Loss("tukey", rho=RHO)
    assert loss_eval(t, 2.0, 2.0) == 0.0
    assert loss_eval(t, RHO, 0.0) == pytest.approx(1.0)
    assert loss_eval(t, 10 * RHO, 0.0) == 1.0
    assert loss_eval(t, RHO / np.sqrt(2.0), 0.0) == pytest.approx(0.875, abs=1e-12)
    assert t.bound == 1.0


def test_softmax_uniform_logits():
    assert loss_eval(Loss("softmax_ce"), [0.0, 0.0], 1) == pytest.approx(np.log(2.0), abs=1e-15)


def test_other_losses():
    assert loss_eval(Loss("squared"), 3.0, 1.0) == 4.0
    assert loss_eval(Loss("hinge"), 0.25, 1.0) == 0.75
    assert loss_eval(Loss("hinge"), 2.0, 1.0) == 0.0
    assert loss_eval(Loss("logistic"), 0.0, 1.0) == pytest.approx(np.log(2.0))
    assert loss_eval(Loss("zero_one"), 0.0, -1.0) == 1.0
    np.testing.assert_array_equal(loss_eval(Loss("zero_one"), np.array([[1.0, 2.0], [3.0, 0.0]]), [1, 1]), [0.0, 1.0])
    assert Loss("zero_one").bound == 1.0


def test_loss_shape_errors():
    with pytest.raises(TaskMismatch):
        loss_eval(Loss("squared"), np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(TaskMismatch):
        loss_eval(Loss("softmax_ce"), np.zeros((3, 1)), np.zeros(3))
    with pytest.raises(ValueError):
        Loss("tukey", rho=0.0)


def _line_basis(x, sigma=0.5):
    return GaussianBasis(np.asarray(x, dtype=float).reshape(-1, 1), sigma)


def test_krr_interpolates_with_tiny_ridge():
    x = np.linspace(0.0, 3.0, 6)[:, None]
    y = np.sin(3 * x[:, 0])
    p = weighted_krr_fit(x, y, np.ones(6), _line_basis(x), 1e-12)
    assert np.max(np.abs(p(x) - y)) <= 1e-6


def test_krr_ignores_zero_weight_label():
    rng = seeded_rng(0)
    x = rng.standard_normal((12, 1))
    y = rng.standard_normal(12)
    w = rng.uniform(0.5, 2.0, 12)
    w[4] = 0.0
    basis = _line_basis(x[:5], 0.8)
    a = weighted_krr_fit(x, y, w, basis, 0.01).alpha
    y[4] += 100.0
    b = weighted_krr_fit(x, y, w, basis, 0.01).alpha
    np.testing.assert_array_equal(a, b)


def test_krr_local_perturbation_optimality():
    rng = seeded_rng(1)
    x = rng.standard_normal((5, 1))
    y = rng.standard_normal(5)
    w = rng.uniform(0.1, 3.0, 5)
    basis = _line_basis(x[:3], 1.0)
    mu = 0.05
    phi = np.array([[gauss_kernel(xi, c, 1.0) for c in basis.centers] for xi in x])

    def objective(a):
        return np.mean(w * (phi @ a - y) ** 2) + mu * a @ a

    alpha = weighted_krr_fit(x, y, w, basis, mu).alpha
    f0 = objective(alpha)
    for _ in range(100):
        d = rng.standard_normal(3)
        assert f0 <= objective(alpha + 1e-3 * d / np.linalg.norm(d))


def test_krr_weight_and_ridge_scaling():
    rng = seeded_rng(2)
    x = rng.standard_normal((20, 2))
    y = rng.standard_normal(20)
    w = rng.uniform(0.0, 2.0, 20)
    basis = GaussianBasis(x[:6], 1.0)
    a = weighted_krr_fit(x, y, w, basis, 0.1).alpha
    b = weighted_krr_fit(x, y, 7.0 * w, basis, 0.7).alpha
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_krr_rejects_bad_inputs():
    x = np.zeros((3, 1))
    with pytest.raises(ValueError):
        weighted_krr_fit(x, np.zeros(3), np.ones(3), _line_basis([0.0]), 0.0)
    with pytest.raises(ValueError):
        weighted_krr_fit(x, np.zeros(3), [1.0, -1.0, 1.0], _line_basis([0.0]), 0.1)


def test_irls_zero_residual_init_is_fixed_point():
    rng = seeded_rng(3)
    x = rng.standard_normal((10, 1))
    basis = _line_basis(x[:4], 1.0)
    init = rng.standard_normal(4)
    y = design_matrix(basis, x) @ init
    res = irls_tukey_fit(x, y, np.ones(10), basis, 1e-14, init=init)
    np.testing.assert_allclose(res.predictor.alpha, init, atol=1e-6)
    assert res.converged


def test_tukey_weight_of_gross_outlier():
    assert tukey_weight(0.99 * RHO, RHO) < 0.01
    assert tukey_weight(2.0 * RHO, RHO) == 0.0
    assert tukey_weight(0.0, RHO) == 1.0


def _outlier_data():
    rng = seeded_rng(4)
    y = 1.0 + 0.1 * rng.standard_normal(20)
    y[7] = 50.0
    return np.zeros((20, 1)), y


def test_irls_matches_grid_search_and_beats_squared_on_inliers():
    x, y = _outlier_data()
    const = GaussianBasis(np.array([[0.0]]), 1e8)  # one constant feature, one parameter
    mu = 1e-6
    res = irls_tukey_fit(x, y, np.ones(20), const, mu, rho=RHO)
    sq = weighted_krr_fit(x, y, np.ones(20), const, mu)

    grid = np.linspace(-5.0, 55.0, 600_001)
    obj = [np.mean(tukey_loss(a - y, RHO)) + mu * a * a for a in grid[::100]]
    coarse = grid[::100][int(np.argmin(obj))]
    fine = grid[np.abs(grid - coarse) <= 0.02]
    best = fine[int(np.argmin([np.mean(tukey_loss(a - y, RHO)) + mu * a * a for a in fine]))]
    assert res.predictor.alpha[0] == pytest.approx(best, abs=1e-3)

    inliers = np.arange(20) != 7
    mse = lambda a: np.mean((a - y[inliers]) ** 2)
    assert mse(res.predictor.alpha[0]) <= mse(sq.alpha[0])


@pytest.mark.parametrize("seed", range(5))
def test_irls_objective_non_increasing(seed):
    rng = seeded_rng(10 + seed)
    x = rng.uniform(-2, 2, (40, 1))
    y = np.sin(x[:, 0]) + 0.3 * rng.standard_t(1.5, 40)
    basis = _line_basis(x[:8], 0.7)
    res = irls_tukey_fit(x, y, rng.uniform(0.2, 2.0, 40), basis, 0.01, scale="mad")
    assert np.all(np.diff(res.objectives) <= 1e-10)


def _toy_setup(seed, mu=0.01):
    rng = seeded_rng(seed)
    pair = gen_toy_regression(150, 150, rng)
    return pair, GaussianBasis(choose_centers(pair.test.x, 50, rng), 1.0), mu


def _test_mse(p, pair):
    return float(np.mean((p(pair.test.x) - pair.test.y) ** 2))


def test_iwerm_uniform_weights_is_plain_erm():
    pair, basis, mu = _toy_setup(0)
    a = iwerm_fit(pair, np.ones(150), Loss("squared"), basis, mu).alpha
    b = weighted_krr_fit(pair.train.x, pair.train.y, np.ones(150), basis, mu).alpha
    np.testing.assert_array_equal(a, b)


def test_iwerm_beats_zero_predictor_on_weighted_risk():
    pair, basis, mu = _toy_setup(1)
    w = pair.true_weights
    for loss in (Loss("squared"), Loss("tukey")):
        f = iwerm_fit(pair, w, loss, basis, mu)
        risk = lambda pred: np.mean(w * loss_eval(loss, pred, pair.train.y))
        assert risk(f(pair.train.x)) <= risk(np.zeros(150))


def test_iwerm_rejects_classification_losses():
    pair, basis, mu = _toy_setup(2)
    with pytest.raises(UnsupportedLoss):
        iwerm_fit(pair, np.ones(150), Loss("hinge"), basis, mu)
    with pytest.raises(ValueError):
        iwerm_fit(pair, np.ones(10), Loss("squared"), basis, mu)


def test_duplicate_equals_double_weight():
    rng = seeded_rng(5)
    x = rng.standard_normal((15, 1))
    y = rng.standard_normal(15)
    basis = _line_basis(x[:5], 0.9)
    mu = 0.02
    w = np.ones(15)
    w[3] = 2.0
    a = weighted_krr_fit(x, y, w, basis, mu).alpha
    xd, yd = np.vstack([x, x[3:4]]), np.append(y, y[3])
    # the ridge term is mu * n, so keep mu * n fixed when n grows by one
    b = weighted_krr_fit(xd, yd, np.ones(16), basis, mu * 15 / 16).alpha
    np.testing.assert_allclose(a, b, atol=1e-10)


def test_oracle_weights_beat_erm_on_toy():
    wins = 0
    for seed in range(100):
        pair, basis, mu = _toy_setup(seed)
        erm = iwerm_fit(pair, np.ones(150), Loss("squared"), basis, mu)
        iw = iwerm_fit(pair, pair.true_weights, Loss("squared"), basis, mu)
        wins += _test_mse(iw, pair) < _test_mse(erm, pair)
    assert wins >= 95


def test_flatten_endpoints():
    w = np.array([0.0, 0.5, 4.0])
    np.testing.assert_array_equal(flatten_weights(w, 0.0), [1.0, 1.0, 1.0])
    np.testing.assert_array_equal(flatten_weights(w, 1.0), w)
    assert flatten_weights(4.0, 0.5) == 2.0
    with pytest.raises(ValueError):
        flatten_weights(w, 1.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_flatten_monotone_on_unit_interval(a, b, gamma):
    lo, hi = sorted((a, b))
    flo, fhi = flatten_weights([lo, hi], gamma)
    assert flo <= fhi
    assert 0.0 <= flo <= 1.0 and 0.0 <= fhi <= 1.0


def test_predict_trivial():
    basis = GaussianBasis(np.array([[0.2], [1.0]]), 0.5)
    out = predict(LinearPredictor(basis, np.zeros(2)), np.arange(4.0)[:, None])
    np.testing.assert_array_equal(out, 0.0)
    np.testing.assert_array_equal(decide(out), 1.0)
    single = LinearPredictor(GaussianBasis(np.array([[0.7]]), 0.3), [3.0])
    assert single([[0.7]])[0] == 3.0
    with pytest.raises(ValueError):
        LinearPredictor(basis, np.zeros(3))


def test_predict_scalar_loop():
    rng = seeded_rng(6)
    c = rng.standard_normal((5, 3))
    alpha = rng.standard_normal(5)
    x = rng.standard_normal((7, 3))
    p = LinearPredictor(GaussianBasis(c, 1.1), alpha)
    expected = [sum(a * gauss_kernel(xi, ci, 1.1) for a, ci in zip(alpha, c)) for xi in x]
    np.testing.assert_allclose(p(x), expected, rtol=1e-12)


def test_loo_residuals_match_refits():
    rng = seeded_rng(7)
    x = rng.standard_normal((12, 1))
    y = rng.standard_normal(12)
    w = rng.uniform(0.5, 1.5, 12)
    basis = _line_basis(x[:4], 1.0)
    mu = 0.05
    loo = loo_residuals(x, y, basis, mu, w)
    phi = design_matrix(basis, x)
    for i in range(12):
        keep = np.arange(12) != i
        # same penalty mu * n as the full fit
        A = phi[keep].T @ (phi[keep] * w[keep, None]) + mu * 12 * np.eye(4)
        a = np.linalg.solve(A, phi[keep].T @ (w[keep] * y[keep]))
        assert loo[i] == pytest.approx(phi[i] @ a - y[i], rel=1e-8)


def test_iwerm_reads_only_training_half():
    # iwerm_fit only reads the training half, so a one-row test side is fine
    d = Dataset(np.zeros((3, 1)), np.array([1.0, 2.0, 3.0]))
    pair = ShiftedPair(d, d.subset([0]))
    f = iwerm_fit(pair, np.ones(3), Loss("squared"), GaussianBasis(np.array([[0.0]]), 1e8), 1e-9)
    assert f([[0.0]])[0] == pytest.approx(2.0, abs=1e-6)
