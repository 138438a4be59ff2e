import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import ndtr

from mtbo.acquisition import (
    ModelSet,
    NoisyEI,
    QMCConfig,
    base_samples,
    best_feasible,
    generate_candidates,
    noisy_ei,
    thompson_select,
)
from mtbo.kernels import SpatialHyperparams, TaskCovariance
from mtbo.mtgp import Dataset, build_model
from oracles import condition, nei_quadrature


def gp(X, y, noise, ls=0.2, tau2=1.0, tasks=None, B=None):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 1 and len(np.atleast_1d(y)) > 1:
        X = X.T
    ds = Dataset(X, y, noise, tasks)
    return build_model(ds, standardize=False, spatial=SpatialHyperparams(tau2, np.full(X.shape[1], ls)),
                       tasks=B)


def col(*v):
    return np.array(v, dtype=float)[:, None]


def oracle_nei(model, X_T, x):
    ds = model.dataset
    pts = np.vstack([X_T, np.atleast_2d(x)])
    m, c = condition(ds.tasks, ds.X, ds.y, ds.noise, np.zeros(len(pts), int), pts, model.tasks.matrix,
                     model.spatial.output_variance, model.spatial.lengthscales, model.jitter)
    return nei_quadrature(m, c)


def test_qmc_config_minimum():
    with pytest.raises(ValueError):
        QMCConfig(sample_count=4)


def test_noiseless_incumbent_has_no_improvement():
    model = gp(col(0.5), [1.0], 0.0)
    val = noisy_ei([0.5], ModelSet(model), col(0.5))
    assert abs(val.value) <= 1e-6
    assert val.samples.shape == (64,)


@pytest.mark.parametrize("seed", range(4))
def test_single_noisy_observation_matches_quadrature(seed):
    rng = np.random.default_rng(seed)
    x0 = rng.random()
    model = gp(col(x0), [rng.normal()], 0.2, ls=0.3)
    for x in rng.random(3):
        got = noisy_ei([x], ModelSet(model), col(x0), QMCConfig(512, seed)).value
        assert got == pytest.approx(oracle_nei(model, col(x0), [x]), abs=1e-3)


def test_independent_constraint_scales_value():
    X_T = col(0.1, 0.2, 0.3)
    obj = gp(X_T, [0.2, 0.5, -0.1], 0.05, ls=0.2)
    # short lengthscale: the constraint at x = 0.9 is independent of its values at X_T, which are surely feasible
    con = gp(col(0.1, 0.2, 0.3, 0.9), [30.0, 30.0, 30.0, 0.4], [1e-4, 1e-4, 1e-4, 0.5], ls=0.01)
    base = base_samples(QMCConfig(64, 3), 2, 3)
    constrained = NoisyEI(ModelSet(obj, [con]), X_T, base=base)([0.9])
    plain = NoisyEI(ModelSet(obj), X_T, base=base[:, :1])([0.9])
    m, v = con.predict([0], [[0.9]], full_cov=False)
    p = ndtr(m[0] / np.sqrt(v[0]))
    np.testing.assert_allclose(constrained.samples, p * plain.samples, atol=1e-8)
    assert constrained.value == pytest.approx(p * plain.value, abs=1e-8)


def test_no_feasible_sample_falls_back_to_feasibility():
    X_T = col(0.2, 0.4)
    obj = gp(X_T, [0.0, 1.0], 0.01)
    con = gp(col(0.2, 0.4, 0.9), [-50.0, -50.0, 0.0], [1e-4, 1e-4, 0.1], ls=0.01)
    acq = NoisyEI(ModelSet(obj, [con]), X_T)
    assert not acq.has_feasible.any()
    m, v = con.predict([0], [[0.9]], full_cov=False)
    assert acq([0.9]).value == pytest.approx(ndtr(m[0] / np.sqrt(v[0])), abs=1e-8)


@st.composite
def acquisition_cases(draw):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    X = rng.random((n, 1))
    model = gp(X, rng.normal(size=n), rng.uniform(0.0, 0.3, n), ls=rng.uniform(0.05, 0.5),
               tau2=rng.uniform(0.2, 3.0))
    cons = []
    if draw(st.booleans()):
        cons.append(gp(X, rng.normal(size=n), 0.05, ls=0.3))
    return ModelSet(model, cons), X, rng.random((5, 1)), rng


@given(acquisition_cases())
def test_value_is_nonnegative(case):
    models, X, xs, _ = case
    acq = NoisyEI(models, X)
    assert np.all(acq.values(xs) >= 0.0)
    assert np.all(acq([xs[0, 0]]).samples >= 0.0)


@given(acquisition_cases())
def test_permutation_invariance(case):
    models, X, xs, rng = case
    perm = rng.permutation(len(X))
    ds = models.objective.dataset
    shuffled = ModelSet(gp(ds.X[perm], ds.y[perm], ds.noise[perm], ls=models.objective.spatial.lengthscales[0],
                           tau2=models.objective.spatial.output_variance),
                        [gp(c.dataset.X[perm], c.dataset.y[perm], c.dataset.noise[perm], ls=0.3)
                         for c in models.constraints])
    np.testing.assert_allclose(NoisyEI(shuffled, X[perm]).values(xs), NoisyEI(models, X).values(xs),
                               rtol=1e-7, atol=1e-10)


def test_doubling_samples_changes_little():
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(30):
        n = int(rng.integers(1, 6))
        X = rng.random((n, 2))
        model = gp(X, rng.normal(size=n), 0.1, ls=0.3)
        x = rng.random(2)
        a = noisy_ei(x, ModelSet(model), X, QMCConfig(64, 1)).value
        b = noisy_ei(x, ModelSet(model), X, QMCConfig(128, 1)).value
        _, v = model.predict([0], [x], full_cov=False)
        # far-tail values are a vanishing fraction of the query's spread and carry no signal
        if b >= 0.05 * np.sqrt(v[0]):
            checked += 1
            assert abs(a - b) < 0.05 * b
    assert checked >= 10


@given(st.floats(0.0, 3.0))
def test_raising_the_query_mean_does_not_lower_value(delta):
    # online data near 0.2; an offline observation at 0.9 moves the online mean there
    X = col(0.15, 0.2, 0.25, 0.9)
    tasks = [0, 0, 0, 1]
    B = TaskCovariance([[1.0, 0.0], [0.9, 0.43589]])

    def value(shift):
        model = gp(X, [0.3, 0.5, 0.2, shift], 0.05, ls=0.1, tasks=tasks, B=B)
        return noisy_ei([0.9], ModelSet(model), X[:3]).value

    assert value(delta) >= value(0.0) - 1e-12


# --- candidate generation ------------------------------------------------------------


def _peaked_model():
    X = np.linspace(0, 1, 15)[:, None]
    return gp(X, -8 * (X[:, 0] - 0.6) ** 2, 0.001, ls=0.15), X


def test_single_candidate_matches_grid_argmax():
    model, X = _peaked_model()
    qmc = QMCConfig(64, 2)
    cand = generate_candidates(ModelSet(model), ([0.0], [1.0]), 1, qmc, seed=3)
    grid = np.linspace(0, 1, 1001)[:, None]
    base = base_samples(qmc, 1, len(X) + 1)
    acq = NoisyEI(ModelSet(model), X, qmc, base=base)
    assert cand.shape == (1, 1)
    assert abs(cand[0, 0] - grid[np.argmax(acq.values(grid)), 0]) <= 0.05


def test_two_candidates_find_both_modes():
    # symmetric gaps at 0.25 and 0.75 between low, precise observations
    X = col(0.0, 0.5, 1.0)
    model = gp(X, [0.0, 0.0, 0.0], 1e-4, ls=0.12)
    cand = generate_candidates(ModelSet(model), ([0.0], [1.0]), 2, QMCConfig(64, 0), seed=0)
    assert abs(cand[0, 0] - cand[1, 0]) > 0.25


def test_degenerate_bounds_give_the_point():
    model, _ = _peaked_model()
    cand = generate_candidates(ModelSet(model), ([0.4], [0.4]), 3, QMCConfig(16, 0))
    np.testing.assert_array_equal(cand, np.full((3, 1), 0.4))


def test_candidates_are_distinct_and_in_bounds():
    rng = np.random.default_rng(0)
    X = rng.random((6, 2))
    model = gp(X, rng.normal(size=6), 0.05, ls=0.3)
    cand = generate_candidates(ModelSet(model), ([0.1, 0.0], [0.6, 1.0]), 4, QMCConfig(32, 0), restarts=4,
                               raw_samples=64)
    d = np.linalg.norm(cand[:, None] - cand[None], axis=-1) + np.eye(4)
    assert d.min() >= 1e-6
    assert np.all(cand >= [0.1, 0.0]) and np.all(cand <= [0.6, 1.0])


def test_candidate_generation_deterministic():
    model, _ = _peaked_model()
    a = generate_candidates(ModelSet(model), ([0.0], [1.0]), 2, QMCConfig(32, 1), seed=9)
    b = generate_candidates(ModelSet(model), ([0.0], [1.0]), 2, QMCConfig(32, 1), seed=9)
    np.testing.assert_array_equal(a, b)


def test_n_o_must_be_positive():
    model, _ = _peaked_model()
    with pytest.raises(ValueError):
        generate_candidates(ModelSet(model), ([0.0], [1.0]), 0)


# --- Thompson selection --------------------------------------------------------------


def _far_prior_model():
    return gp(col(0.0), [0.0], 0.01, ls=0.01)


def test_dominating_candidate_selected_first():
    model = gp(col(0.0, 0.5), [0.0, 10.0], [0.01, 0.0], ls=0.01)
    cands = col(0.2, 0.5, 0.8)
    assert thompson_select(ModelSet(model), cands, 1, draws=500, seed=0) == [1]


def test_exchangeable_candidates_are_uniform():
    model = _far_prior_model()
    cands = col(0.2, 0.4, 0.6, 0.8, 1.0)
    counts = np.bincount([thompson_select(ModelSet(model), cands, 1, draws=50, seed=s)[0] for s in range(200)],
                         minlength=5)
    sigma = np.sqrt(200 * 0.2 * 0.8)
    assert np.all(np.abs(counts - 40) <= 3 * sigma)


def test_select_all_and_determinism():
    model = _far_prior_model()
    cands = col(0.2, 0.4, 0.6, 0.8)
    assert sorted(thompson_select(ModelSet(model), cands, 4, seed=1)) == [0, 1, 2, 3]
    assert thompson_select(ModelSet(model), cands, 2, seed=5) == thompson_select(ModelSet(model), cands, 2, seed=5)
    with pytest.raises(ValueError):
        thompson_select(ModelSet(model), cands, 5)


def test_infeasible_draws_pick_largest_slack():
    obj = _far_prior_model()
    con = gp(col(0.2, 0.4, 0.6), [-5.0, -1.0, -9.0], 0.0, ls=0.01)
    assert thompson_select(ModelSet(obj, [con]), col(0.2, 0.4, 0.6), 1, draws=100)[0] == 1


# --- best feasible -------------------------------------------------------------------


def test_best_feasible_cases():
    X = col(0.1, 0.5, 0.9)
    obj = gp(X, [0.2, 0.7, 0.9], 0.0, ls=0.01)
    assert best_feasible(ModelSet(obj))[1] == pytest.approx(0.9, abs=1e-5)
    con = gp(X, [1.0, 1.0, -1.0], 0.0, ls=0.01)
    point, value = best_feasible(ModelSet(obj, [con]))
    assert point[0] == 0.5 and value == pytest.approx(0.7, abs=1e-5)
    bad = gp(X, [-1.0, -1.0, -1.0], 0.0, ls=0.01)
    assert best_feasible(ModelSet(obj, [bad])) is None


def test_best_feasible_ignores_offline_points():
    X = col(0.1, 0.5, 0.9)
    B = TaskCovariance([[1.0, 0.0], [0.5, 0.8]])
    obj = gp(X, [0.2, 0.3, 5.0], 0.0, ls=0.01, tasks=[0, 0, 1], B=B)
    point, _ = best_feasible(ModelSet(obj))
    assert point[0] in (0.1, 0.5)
