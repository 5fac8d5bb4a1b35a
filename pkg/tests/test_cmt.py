import numpy as np
import pytest

from shiftlab.cmt import (
    LAMBDA_GRID,
    AffineMechanism,
    CmtConfig,
    InflationSet,
    MixingFamily,
    _contrast_pairs,
    amari_distance,
    cmt_fit,
    cmt_risk,
    extract_ics,
    gcl_fit,
    gcl_objective,
    identity_mechanism,
    inflate,
    joint,
    load_mechanism,
    save_mechanism,
    support_filter,
    synthesize,
    taronly_fit,
)
from shiftlab.data import Dataset
from shiftlab.erm import LinearPredictor, Loss
from shiftlab.errors import NeedTwoDomains, ParseError, SingularMechanism
from shiftlab.kernels import GaussianBasis
from shiftlab.nnet import Mlp
from shiftlab.numerics import seeded_rng

SQ = Loss("squared")


def _domains(seed, n=300, dim=2, k=3):
    rng = seeded_rng(seed)
    fam = MixingFamily.random(dim, k, rng)
    return fam, fam.sample_sources(n, rng), rng


def test_gcl_needs_two_domains():
    _, doms, rng = _domains(0)
    with pytest.raises(NeedTwoDomains):
        gcl_fit(doms[:1], rng=rng)


def test_gcl_objective_decreases():
    decreased = 0
    for seed in range(5):
        _, doms, rng = _domains(seed)
        model = gcl_fit(doms, hidden_units=10, lr=1e-2, epochs=10, rng=rng)
        decreased += model.history[-1] <= model.history[0]
    assert decreased >= 4


def test_gcl_objective_ignores_sample_order():
    rng = seeded_rng(1)
    z = rng.standard_normal((50, 2))
    labels = rng.integers(0, 3, 50)
    other = _contrast_pairs(labels, 3, rng)
    phis = [Mlp.init([1, 5, 3], rng) for _ in range(2)]
    W, b = rng.standard_normal((2, 2)), rng.standard_normal(2)
    perm = rng.permutation(50)
    a = gcl_objective(W, b, phis, z, labels, other)
    c = gcl_objective(W, b, phis, z[perm], labels[perm], other[perm])
    assert a == pytest.approx(c, rel=1e-12)


def test_contrast_pairs_never_pick_own_domain():
    labels = np.repeat(np.arange(4), 250)
    other = _contrast_pairs(labels, 4, seeded_rng(2))
    assert not np.any(other == labels)
    assert set(np.unique(other)) == {0, 1, 2, 3}


def _target(rows):
    rows = np.asarray(rows, dtype=float)
    return Dataset(rows[:, :-1], rows[:, -1])


def test_extract_identity_and_diagonal():
    t = _target([[1.0, 2.0], [3.0, -1.0]])
    np.testing.assert_array_equal(extract_ics(identity_mechanism(2), t), joint(t))
    mech = AffineMechanism(np.diag([0.5, 0.25]))  # inverse of F = diag(2, 4)
    np.testing.assert_allclose(extract_ics(mech, _target([[2.0, 4.0]])), [[1.0, 1.0]])


def test_affine_round_trip_on_probes():
    rng = seeded_rng(3)
    mech = AffineMechanism(rng.standard_normal((3, 3)), rng.standard_normal(3))
    z = rng.standard_normal((100, 3))
    assert np.max(np.abs(mech.forward(mech.inverse(z)) - z)) <= 1e-8
    with pytest.raises(SingularMechanism):
        AffineMechanism([[1.0, 2.0], [2.0, 4.0]])


def test_inflate_enumeration():
    infl = inflate(np.array([[1.0, 10.0], [2.0, 20.0]]))
    assert [tuple(c) for c in infl.combos] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert infl.diagonal.tolist() == [True, False, False, True]


def test_inflate_one_dimension_is_identity():
    ics = np.arange(5.0)[:, None]
    infl = inflate(ics)
    np.testing.assert_array_equal(infl.ics[infl.combos[:, 0], 0], ics[:, 0])
    assert infl.diagonal.all()


def test_inflate_capped_subsample():
    infl = inflate(np.zeros((10, 4)), cap=500, rng=seeded_rng(4))
    tuples = {tuple(c) for c in infl.combos}
    assert len(infl.combos) == 500 and len(tuples) == 500
    assert all((j,) * 4 in tuples for j in range(10))
    assert infl.combos.min() >= 0 and infl.combos.max() <= 9
    assert infl.diagonal.sum() == 10


@pytest.mark.parametrize("n,dim,cap", [(3, 2, 100), (4, 3, 20), (7, 2, 49), (7, 2, 48)])
def test_inflation_cardinality(n, dim, cap):
    infl = inflate(np.zeros((n, dim)), cap=cap, rng=seeded_rng(5))
    assert len(infl.combos) == min(n**dim, cap)
    assert infl.diagonal.sum() == n


def test_synthesize_diagonal_reproduces_target():
    rng = seeded_rng(6)
    mech = AffineMechanism(rng.standard_normal((2, 2)) + 2 * np.eye(2), rng.standard_normal(2))
    t = _target(rng.standard_normal((5, 2)))
    infl = inflate(extract_ics(mech, t))
    synth = synthesize(mech, infl)
    np.testing.assert_allclose(joint(synth)[infl.diagonal], joint(t), atol=1e-8)


def test_synthesize_identity_recombines_coordinates():
    t = _target([[1.0, 10.0], [2.0, 20.0]])
    synth = synthesize(identity_mechanism(2), inflate(extract_ics(identity_mechanism(2), t)))
    assert sorted(map(tuple, joint(synth))) == [(1.0, 10.0), (1.0, 20.0), (2.0, 10.0), (2.0, 20.0)]


def test_synthesize_affine_hand_checked():
    W = np.array([[2.0, 1.0], [1.0, 1.0]])  # F^{-1}(z) = W z, so F(s) = W^{-1} s
    mech = AffineMechanism(W)
    ics = np.array([[1.0, 0.0], [0.0, 1.0]])
    infl = InflationSet(ics, np.array([[0, 1]]), np.array([False]))
    # s = (1, 1); W^{-1} = [[1, -1], [-1, 2]]
    np.testing.assert_allclose(joint(synthesize(mech, infl)), [[0.0, 1.0]], atol=1e-14)


def _pool(rng, n=200):
    return _target(rng.standard_normal((n, 2)))


def test_filter_tiny_quantile_drops_nothing():
    rng = seeded_rng(7)
    synth = _target(rng.standard_normal((30, 2)))
    out, kept = support_filter(synth, _pool(rng), 1e-9)
    assert kept.all() and out.n == 30


def test_filter_drops_far_point():
    rng = seeded_rng(8)
    rows = 0.5 * rng.standard_normal((10, 2))
    rows[3] = [10.0, 10.0]
    _, kept = support_filter(_target(rows), _pool(rng), 0.1, bandwidth=1.0)
    assert kept.tolist() == [i != 3 for i in range(10)]


@pytest.mark.parametrize("q", [0.05, 0.1, 0.33, 0.5])
def test_filter_drop_fraction(q):
    rng = seeded_rng(9)
    synth = _target(2 * rng.standard_normal((97, 2)))
    _, kept = support_filter(synth, _pool(rng), q)
    assert abs((~kept).mean() - q) <= 1.0 / 97


def test_filter_never_drops_protected_rows():
    rng = seeded_rng(10)
    rows = rng.standard_normal((10, 2))
    rows[:3] = 50.0
    keep = np.zeros(10, dtype=bool)
    keep[:3] = True
    _, kept = support_filter(_target(rows), _pool(rng), 0.3, keep=keep)
    assert kept[:3].all() and (~kept).sum() == 3


def _line(alpha):
    return LinearPredictor(GaussianBasis(np.array([[0.0]]), 1e8), [alpha])


def test_cmt_risk_diagonal_only_is_empirical_risk():
    rng = seeded_rng(11)
    t = _target(rng.standard_normal((6, 2)))
    mech = identity_mechanism(2)
    infl = inflate(extract_ics(mech, t), cap=6, rng=rng)
    f = _line(0.3)
    assert cmt_risk(f, synthesize(mech, infl, target=t), SQ) == cmt_risk(f, t, SQ)


def test_cmt_risk_cases():
    t = _target([[1.0, 2.0], [3.0, 2.0]])
    assert cmt_risk(lambda x: np.full(len(x), 2.0), t, SQ) == 0.0
    rng = seeded_rng(12)
    d = _target(rng.standard_normal((8, 2)))
    expected = sum((0.7 - yi) ** 2 for yi in d.y) / 8
    assert cmt_risk(_line(0.7), d, SQ) == pytest.approx(expected, rel=1e-14)


def test_lambda_grid():
    assert LAMBDA_GRID[0] == 2.0**-10 and LAMBDA_GRID[-1] == 2.0**10 and len(LAMBDA_GRID) == 21


def test_diagonal_only_cmt_equals_taronly():
    rng = seeded_rng(13)
    t = _target(rng.standard_normal((8, 3)))
    cfg = CmtConfig(cap=8, filter_quantile=None)
    a = cmt_fit([], t, identity_mechanism(3), cfg, rng)
    b = taronly_fit(t, cfg)
    np.testing.assert_array_equal(a.alpha, b.alpha)


def test_cmt_beats_taronly_with_oracle_mechanism():
    diffs = []
    cfg = CmtConfig(filter_quantile=None)
    for rep in range(200):
        rng = seeded_rng(14, rep)
        draw = lambda n: _target(rng.laplace(0.0, [1.0, 0.5], size=(n, 2)))
        t, test = draw(6), draw(500)
        mse = lambda f: float(np.mean((f(test.x) - test.y) ** 2))
        diffs.append(mse(cmt_fit([], t, identity_mechanism(2), cfg, rng)) - mse(taronly_fit(t, cfg)))
    assert np.mean(diffs) <= 0.0


def test_amari_distance():
    assert amari_distance(np.eye(3)) == 0.0
    assert amari_distance(np.array([[0.0, 2.0], [-3.0, 0.0]])) == 0.0
    assert amari_distance(np.ones((2, 2))) == pytest.approx(1.0)
    P = seeded_rng(15).standard_normal((4, 4))
    assert 0.0 < amari_distance(P) <= 1.0


def test_mechanism_checkpoint(tmp_path):
    rng = seeded_rng(16)
    mech = AffineMechanism(rng.standard_normal((3, 3)), rng.standard_normal(3))
    path = tmp_path / "mech.bin"
    save_mechanism(mech, path)
    assert path.read_bytes()[:4] == b"CMT1"
    back = load_mechanism(path)
    np.testing.assert_array_equal(back.W, mech.W)
    np.testing.assert_array_equal(back.b, mech.b)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(ParseError):
        load_mechanism(path)


def test_mixing_family_shapes_and_mechanism():
    fam, doms, rng = _domains(17, n=40, dim=3, k=4)
    assert len(doms) == 4 and all(d.dim == 2 and d.n == 40 for d in doms)
    t = fam.sample_target(7, rng)
    s = extract_ics(fam.mechanism, t)
    np.testing.assert_allclose(s @ fam.A.T, joint(t), atol=1e-10)
