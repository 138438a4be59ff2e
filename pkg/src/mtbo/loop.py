"""
The interleaved online/offline Bayesian optimization loop.

Task ids: 0 is the online task; simulator batch ``b`` (0 = the initial
quasi-random batch) is task ``1 + b``. With two or more simulator batches the
task factor is a :class:`~mtbo.kernels.BatchAdjusted` composite and every batch
after the first gets its own constant mean offset.

The loop works on canonical outcomes (objective maximized, constraints
feasible at ``>= 0``); the problem object converts its native values with
``problem.canonical``.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import qmc

from .acquisition import ModelSet, QMCConfig, best_feasible, generate_candidates, thompson_select
from .kernels import BatchAdjusted, FreeFactor
from .mtgp import Dataset, default_layout, fit, inter_task_correlation

log = logging.getLogger(__name__)


class LoopError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class LoopConfig:
    n_T: int = 5
    n_S: int = 20
    n_o: int = 20
    K: int = 3
    anchor_count: int = 5
    rank_batch: int = 1
    interleave: bool = True
    fit_restarts: int = 5
    qmc_samples: int = 64
    acq_restarts: int = 20
    raw_samples: int = 256
    thompson_draws: int = 1000
    seed: int = 0

    def __post_init__(self):
        if not self.n_T >= 1:
            raise ValueError("n_T must be >= 1")
        if self.interleave and not self.n_o >= self.n_T:
            raise ValueError("n_o must be >= n_T")
        if self.interleave and self.n_S < 1:
            raise ValueError("interleaving needs n_S >= 1")
        if self.n_S < 0 or self.K < 0:
            raise ValueError("n_S and K must be nonnegative")
        if self.anchor_count > self.n_S:
            self.anchor_count = self.n_S
        if self.rank_batch < 1:
            raise ValueError("rank_batch must be >= 1")


@dataclass(frozen=True)
class Evaluation:
    point: tuple
    online: bool
    batch: int
    values: dict
    noise: dict


@dataclass
class BatchRecord:
    iteration: int
    kind: str
    policies: list
    observations: dict
    incumbent: float | None
    best_feasible_value: float | None
    best_feasible_point: list | None
    rho: dict

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class OptimizationTrace:
    records: list = field(default_factory=list)
    best_point: list | None = None
    best_value: float | None = None
    history: list = field(default_factory=list, repr=False)

    def online_records(self):
        return [r for r in self.records if r.kind == "online"]

    def to_jsonl(self) -> str:
        return "".join(r.to_json() + "\n" for r in self.records)

    def best_feasible_csv(self) -> str:
        lines = ["iteration,best_feasible"]
        for r in self.online_records():
            lines.append(f"{r.iteration},{'' if r.incumbent is None else repr(float(r.incumbent))}")
        return "\n".join(lines) + "\n"


def _sobol(n, dim, seed):
    if n == 0:
        return np.zeros((0, dim))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return qmc.Sobol(dim, scramble=True, seed=seed).random(n)


def sobol_initialization(bounds, n_T, n_S, seed_T, seed_S):
    """Online and offline designs from two independently scrambled Sobol sequences."""
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    if lo.shape != hi.shape or np.any(hi < lo):
        raise ValueError("invalid bounds")
    XT = lo + _sobol(n_T, lo.size, seed_T) * (hi - lo)
    XS = lo + _sobol(n_S, lo.size, seed_S) * (hi - lo)
    return XT, XS


def assemble_tasks(history, outcome) -> Dataset:
    """One outcome's observations with online -> task 0 and simulator batch b -> task 1 + b."""
    if not history:
        raise ValueError("empty history")
    off_batches = sorted({e.batch for e in history if not e.online})
    task_of = {b: 1 + i for i, b in enumerate(off_batches)}
    X = np.array([e.point for e in history], dtype=float)
    tasks = [0 if e.online else task_of[e.batch] for e in history]
    return Dataset(X, [e.values[outcome] for e in history], [e.noise[outcome] for e in history], tasks,
                   [e.batch for e in history], outcome)


def task_structure(n_tasks, rank_batch=1):
    """Task structure and offset tasks used by the loop for ``n_tasks`` tasks."""
    if n_tasks == 1:
        return None, ()
    if n_tasks == 2:
        return FreeFactor(2), ()
    offsets = tuple(range(2, n_tasks))
    if rank_batch == 1:
        return BatchAdjusted(n_tasks - 1), offsets
    return FreeFactor(n_tasks, min(n_tasks, max(2, rank_batch))), offsets


def _warm_start(prev, layout):
    """Map a previous fit onto a (possibly larger) layout."""
    if prev is None:
        return None
    if prev.layout.size == layout.size and type(prev.layout.structure) is type(layout.structure):
        return prev.theta
    D = layout.n_tasks
    L = prev.tasks.factor
    rank = layout.structure.factor(np.zeros(layout.structure.n_params)).shape[1]
    F = np.zeros((D, rank))
    k = min(rank, L.shape[1])
    F[:L.shape[0], :k] = L[:, :k]
    for d in range(L.shape[0], D):
        F[d] = F[min(1, L.shape[0] - 1)]
    off = np.zeros(D)
    off[:min(D, len(prev.offsets))] = prev.offsets[:D]
    return layout.pack(prev.spatial, F, off)


def fit_models(history, outcomes, config: LoopConfig, seed, previous=None):
    models = {}
    rng = np.random.default_rng(seed)
    for name in outcomes:
        ds = assemble_tasks(history, name)
        structure, offsets = task_structure(ds.n_tasks, config.rank_batch)
        layout = default_layout(ds, None, structure, offsets)
        init = _warm_start(previous.get(name) if previous else None, layout)
        models[name] = fit(ds, restarts=config.fit_restarts, seed=int(rng.integers(2 ** 31)),
                           structure=structure, offset_tasks=offsets, init=None if init is None else [init])
    return models


def _model_set(models, outcomes):
    return ModelSet(models[outcomes[0]], [models[o] for o in outcomes[1:]])


def run_loop(problem, config: LoopConfig, on_record=None) -> OptimizationTrace:
    """
    Run the online/offline loop on ``problem``.

    ``problem`` provides ``dimension``, ``outcomes`` (objective first),
    ``evaluate(x, task, rng) -> {outcome: Observation}`` with native values,
    ``canonical(outcome, value)`` and ``native_objective(value)``.
    ``on_record`` is called with each :class:`BatchRecord` as it is produced.
    """
    trace = OptimizationTrace()
    try:
        _run(problem, config, trace, on_record)
    except LoopError:
        raise
    except Exception as exc:  # keep the partial trace for the caller
        raise LoopError(f"{type(exc).__name__}: {exc}", trace) from exc
    return trace


def _run(problem, config, trace, on_record):
    outcomes = list(problem.outcomes)
    dim = problem.dimension
    bounds = (np.zeros(dim), np.ones(dim))
    seeds = np.random.SeedSequence(config.seed).generate_state(6)
    seed_T, seed_S, seed_noise, seed_fit, seed_acq, seed_ts = (int(s) for s in seeds)
    rng_noise = np.random.default_rng(seed_noise)
    rng_fit = np.random.default_rng(seed_fit)
    rng_acq = np.random.default_rng(seed_acq)
    rng_ts = np.random.default_rng(seed_ts)
    history = trace.history
    qmc_config = QMCConfig(config.qmc_samples, int(rng_acq.integers(2 ** 31)))
    state = {"incumbent": None, "models": None, "n_offline": 0}

    def evaluate(X, online, batch):
        native = {o: [] for o in outcomes}
        for x in X:
            obs = problem.evaluate(x, 0 if online else 1, rng_noise)
            vals = {o: problem.canonical(o, obs[o].mean) for o in outcomes}
            history.append(Evaluation(tuple(float(v) for v in x), online, batch, vals,
                                      {o: obs[o].noise_variance for o in outcomes}))
            for o in outcomes:
                native[o].append(float(obs[o].mean))
        return native

    def refit():
        state["models"] = fit_models(history, outcomes, config, int(rng_fit.integers(2 ** 31)), state["models"])
        return state["models"]

    def record(iteration, kind, X, native):
        models = refit()
        bf = best_feasible(_model_set(models, outcomes))
        bf_val = None if bf is None else float(bf[1])
        if kind == "online" and bf_val is not None:
            inc = state["incumbent"]
            state["incumbent"] = bf_val if inc is None else max(inc, bf_val)
        rho = {o: (inter_task_correlation(m, 0, 1) if m.n_tasks >= 2 else None) for o, m in models.items()}
        rec = BatchRecord(
            iteration, kind, [list(map(float, x)) for x in X], native,
            None if state["incumbent"] is None else problem.native_objective(state["incumbent"]),
            None if bf_val is None else problem.native_objective(bf_val),
            None if bf is None else list(map(float, bf[0])), rho)
        trace.records.append(rec)
        if on_record is not None:
            on_record(rec)
        return models

    # quasi-random designs, evaluated on the simulator and online
    XT, XS = sobol_initialization(bounds, config.n_T, config.n_S, seed_T, seed_S)
    anchors = XS[:config.anchor_count]
    if len(XS):
        native = evaluate(XS, False, 0)
        state["n_offline"] = 1
        trace.records.append(BatchRecord(0, "offline", [list(map(float, x)) for x in XS], native, None, None,
                                         None, {}))
        if on_record is not None:
            on_record(trace.records[-1])
    native = evaluate(XT, True, 0)
    models = record(0, "online", XT, native)

    for k in range(1, config.K + 1):
        ms = _model_set(models, outcomes)
        if config.interleave:
            cands = generate_candidates(ms, bounds, config.n_o, qmc_config, int(rng_acq.integers(2 ** 31)),
                                        restarts=config.acq_restarts, raw_samples=config.raw_samples)
            Xs = np.vstack([cands, anchors]) if len(anchors) else cands
            native = evaluate(Xs, False, state["n_offline"])
            state["n_offline"] += 1
            models = record(k, "offline", Xs, native)
            sel = thompson_select(_model_set(models, outcomes), cands, config.n_T, config.thompson_draws,
                                  int(rng_ts.integers(2 ** 31)))
            X_on = cands[sel]
        else:
            X_on = generate_candidates(ms, bounds, config.n_T, qmc_config, int(rng_acq.integers(2 ** 31)),
                                       restarts=config.acq_restarts, raw_samples=config.raw_samples)
        native = evaluate(X_on, True, k)
        models = record(k, "online", X_on, native)

    bf = best_feasible(_model_set(models, outcomes))
    if bf is not None:
        trace.best_point = list(map(float, bf[0]))
        trace.best_value = problem.native_objective(bf[1])
