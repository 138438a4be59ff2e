import numpy as np
import pytest

from mtbo.bench import ProblemSpec, synthetic_problem
from mtbo.kernels import BatchAdjusted, FreeFactor, SpatialHyperparams, TaskCovariance
from mtbo.loop import (
    Evaluation,
    LoopConfig,
    LoopError,
    _warm_start,
    assemble_tasks,
    fit_models,
    run_loop,
    sobol_initialization,
    task_structure,
)
from mtbo.mtgp import Dataset, build_model, default_layout, fit

FAST = dict(fit_restarts=1, acq_restarts=2, raw_samples=32, qmc_samples=16, thompson_draws=100)


def quadratic(x, task):
    return -(x[0] - 0.3) ** 2


def quadratic_problem(noise=0.0):
    return ProblemSpec(1, quadratic, noise_sd=(noise, noise), sense="max")


@pytest.fixture(scope="module")
def synthetic_trace():
    return run_loop(synthetic_problem(), LoopConfig(seed=3, **FAST))


# --- initialization and task assembly ------------------------------------------------


def test_sobol_shapes_and_bounds():
    XT, XS = sobol_initialization(([0.0, -1.0], [1.0, 1.0]), 5, 20, 1, 2)
    assert XT.shape == (5, 2) and XS.shape == (20, 2)
    assert np.all(XT >= [0, -1]) and np.all(XT <= [1, 1])
    assert not np.allclose(XT, XS[:5])


def test_sobol_is_seeded():
    a = sobol_initialization(([0.0], [1.0]), 4, 4, 1, 2)
    b = sobol_initialization(([0.0], [1.0]), 4, 4, 1, 2)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_sobol_degenerate_bounds_and_zero_offline():
    XT, XS = sobol_initialization(([0.5], [0.5]), 3, 0, 0, 0)
    np.testing.assert_array_equal(XT, np.full((3, 1), 0.5))
    assert XS.shape == (0, 1)
    with pytest.raises(ValueError):
        sobol_initialization(([1.0], [0.0]), 3, 3, 0, 0)


def _ev(x, online, batch, y=0.0):
    return Evaluation((x,), online, batch, {"objective": y}, {"objective": 0.01})


def test_assemble_tasks_maps_batches():
    history = [_ev(0.1, False, 0), _ev(0.2, True, 0), _ev(0.3, False, 2), _ev(0.4, True, 1), _ev(0.5, False, 1)]
    ds = assemble_tasks(history, "objective")
    np.testing.assert_array_equal(ds.tasks, [1, 0, 3, 0, 2])
    assert ds.n_tasks == 4 and ds.outcome == "objective"
    with pytest.raises(ValueError):
        assemble_tasks([], "objective")


def test_assemble_online_only():
    ds = assemble_tasks([_ev(0.1, True, 0), _ev(0.2, True, 1)], "objective")
    assert ds.n_tasks == 1


@pytest.mark.parametrize("n, kind, offsets", [
    (1, type(None), ()),
    (2, FreeFactor, ()),
    (3, BatchAdjusted, (2,)),
    (5, BatchAdjusted, (2, 3, 4)),
])
def test_task_structure(n, kind, offsets):
    structure, off = task_structure(n)
    assert isinstance(structure, kind) and off == offsets


def test_task_structure_higher_batch_rank():
    structure, off = task_structure(4, rank_batch=3)
    assert isinstance(structure, FreeFactor) and off == (2, 3)


def test_warm_start_grows_with_tasks():
    rng = np.random.default_rng(0)
    X = rng.random((8, 1))
    ds2 = Dataset(X, np.sin(6 * X[:, 0]), 0.01, [0, 0, 0, 0, 1, 1, 1, 1])
    prev = fit(ds2, restarts=1, structure=FreeFactor(2))
    ds3 = Dataset(X, np.sin(6 * X[:, 0]), 0.01, [0, 0, 0, 1, 1, 1, 2, 2])
    structure, off = task_structure(3)
    layout = default_layout(ds3, None, structure, off)
    theta = _warm_start(prev, layout)
    assert theta.shape == (layout.size,)
    spatial, _, offsets = layout.unpack(theta)
    np.testing.assert_allclose(spatial.lengthscales, prev.spatial.lengthscales)
    assert _warm_start(None, layout) is None
    assert _warm_start(prev, prev.layout) is prev.theta


# --- config --------------------------------------------------------------------------


@pytest.mark.parametrize("kwargs", [dict(n_T=0), dict(n_o=2, n_T=5), dict(n_S=0), dict(K=-1), dict(rank_batch=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        LoopConfig(**kwargs)


def test_config_clips_anchors():
    assert LoopConfig(n_S=3, anchor_count=5).anchor_count == 3
    assert LoopConfig(n_S=0, interleave=False).n_S == 0


# --- runs ----------------------------------------------------------------------------


def test_synthetic_run_has_twenty_online_observations(synthetic_trace):
    online = [e for e in synthetic_trace.history if e.online]
    assert len(online) == 20
    assert [r.iteration for r in synthetic_trace.online_records()] == [0, 1, 2, 3]
    offline = [r for r in synthetic_trace.records if r.kind == "offline"]
    assert [len(r.policies) for r in offline] == [20, 25, 25, 25]


def test_anchors_repeat_in_every_offline_batch(synthetic_trace):
    offline = [r for r in synthetic_trace.records if r.kind == "offline"]
    anchors = offline[0].policies[:5]
    for r in offline[1:]:
        assert r.policies[-5:] == anchors


def test_selected_online_points_come_from_offline_candidates(synthetic_trace):
    recs = synthetic_trace.records
    for k in range(1, 4):
        cands = next(r for r in recs if r.kind == "offline" and r.iteration == k).policies[:20]
        online = next(r for r in recs if r.kind == "online" and r.iteration == k).policies
        assert all(p in cands for p in online)


def test_best_point_is_an_online_point(synthetic_trace):
    online = {e.point for e in synthetic_trace.history if e.online}
    assert tuple(synthetic_trace.best_point) in online


def test_incumbent_is_monotone(synthetic_trace):
    inc = [r.incumbent for r in synthetic_trace.online_records() if r.incumbent is not None]
    # native sense is minimization
    assert all(b <= a for a, b in zip(inc, inc[1:]))


def test_serialization(synthetic_trace):
    lines = synthetic_trace.to_jsonl().splitlines()
    assert len(lines) == len(synthetic_trace.records)
    csv = synthetic_trace.best_feasible_csv().splitlines()
    assert csv[0] == "iteration,best_feasible" and len(csv) == 5


def test_zero_iterations():
    trace = run_loop(quadratic_problem(), LoopConfig(n_T=3, n_S=4, K=0, **FAST))
    assert len(trace.online_records()) == 1
    assert sum(e.online for e in trace.history) == 3
    assert trace.best_point is not None


def test_noiseless_quadratic_finds_maximizer():
    trace = run_loop(quadratic_problem(), LoopConfig(n_T=3, n_S=5, n_o=5, K=3, anchor_count=2, seed=1, **FAST))
    assert abs(trace.best_point[0] - 0.3) <= 0.05


def test_online_only_run():
    cfg = LoopConfig(n_T=2, n_S=0, n_o=2, K=2, interleave=False, anchor_count=0, **FAST)
    trace = run_loop(quadratic_problem(0.01), cfg)
    assert all(e.online for e in trace.history)
    assert all(r.kind == "online" for r in trace.records)


def test_run_is_deterministic():
    cfg = LoopConfig(n_T=2, n_S=4, n_o=3, K=2, anchor_count=1, seed=11, **FAST)
    a = run_loop(quadratic_problem(0.05), cfg)
    b = run_loop(quadratic_problem(0.05), cfg)
    assert a.to_jsonl() == b.to_jsonl()


def test_callback_sees_every_record():
    seen = []
    trace = run_loop(quadratic_problem(), LoopConfig(n_T=2, n_S=3, n_o=2, K=1, **FAST), on_record=seen.append)
    assert seen == trace.records


def test_failure_keeps_partial_trace():
    calls = {"n": 0}

    class Flaky(ProblemSpec):
        def evaluate(self, x, task, rng):
            calls["n"] += 1
            if calls["n"] > 8:
                raise RuntimeError("simulator down")
            return super().evaluate(x, task, rng)

    problem = Flaky(1, quadratic, noise_sd=(0.0, 0.0), sense="max")
    with pytest.raises(LoopError) as err:
        run_loop(problem, LoopConfig(n_T=2, n_S=4, n_o=3, K=2, **FAST))
    assert "simulator down" in str(err.value)
    assert len(err.value.trace.history) == 8
    assert len(err.value.trace.records) >= 1


def test_unit_correlation_matches_pooled_single_task():
    # same evaluator on both channels; with rho = 1 the task split carries no information
    cfg = LoopConfig(n_T=2, n_S=4, n_o=3, K=2, anchor_count=1, seed=4, **FAST)
    trace = run_loop(quadratic_problem(0.05), cfg)
    h = SpatialHyperparams(0.5, np.array([0.2]))
    grid = np.linspace(0, 1, 7)[:, None]
    ends = np.cumsum([len(r.policies) for r in trace.records])
    for end in ends:
        ds = assemble_tasks(trace.history[:end], "objective")
        B = TaskCovariance(np.ones((ds.n_tasks, 1)))
        multi = build_model(ds, standardize=False, spatial=h, tasks=B)
        pooled = build_model(Dataset(ds.X, ds.y, ds.noise), standardize=False, spatial=h)
        m1, c1 = multi.predict(np.zeros(7, int), grid)
        m2, c2 = pooled.predict(np.zeros(7, int), grid)
        np.testing.assert_allclose(m1, m2, atol=1e-6)
        np.testing.assert_allclose(c1, c2, atol=1e-6)


def test_fit_models_covers_outcomes():
    history = [Evaluation((x,), x < 0.5, 0, {"a": x, "b": -x}, {"a": 0.01, "b": 0.01})
               for x in np.linspace(0, 1, 8)]
    models = fit_models(history, ["a", "b"], LoopConfig(fit_restarts=1), 0)
    assert set(models) == {"a", "b"}
    assert models["a"].n_tasks == 2
