"""
Synthetic online/offline benchmark: constrained Hartmann-6 with a biased
simulator, and the three-method comparison harness.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .loop import LoopConfig, run_loop
from .mtgp import Observation

log = logging.getLogger(__name__)

HARTMANN6_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
HARTMANN6_A = np.array([
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
])
HARTMANN6_P = 1e-4 * np.array([
    [1312, 1696, 5569, 124, 8283, 5886],
    [2329, 4135, 8307, 3736, 1004, 9991],
    [2348, 1451, 3522, 2883, 3047, 6650],
    [4047, 8828, 8732, 5743, 1091, 381],
])
HARTMANN6_MINIMIZER = np.array([0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573])
HARTMANN6_MINIMUM = -3.32237

# reported for a run that has not yet observed a truly feasible point; f < 0 everywhere
NO_FEASIBLE_VALUE = 0.0

METHODS = ("single_task", "mtgp_init_only", "mtgp_full")


def hartmann6(x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (6,):
        raise ValueError("hartmann6 takes a 6-vector")
    if np.any(x < 0) or np.any(x > 1):
        raise ValueError("hartmann6 is defined on [0, 1]^6")
    inner = np.sum(HARTMANN6_A * (x - HARTMANN6_P) ** 2, axis=1)
    return float(-np.sum(HARTMANN6_ALPHA * np.exp(-inner)))


@dataclass(frozen=True)
class BiasTransform:
    """Piecewise-linear map with slope ``alpha1`` below ``m`` and ``alpha2`` above."""

    m: float
    alpha1: float
    alpha2: float

    def __call__(self, v):
        return offline_transform(v, self)


OBJECTIVE_TRANSFORM = BiasTransform(0.75, 0.4, 0.8)
CONSTRAINT_TRANSFORM = BiasTransform(1.25, 0.8, 4.0)


def offline_transform(v, t: BiasTransform):
    v = np.asarray(v, dtype=float)
    out = np.where(v <= t.m, t.alpha1 * (v - t.m) + t.m, t.alpha2 * (v - t.m) + t.m)
    return float(out) if out.ndim == 0 else out


@dataclass
class ProblemSpec:
    """
    Objective and upper-bounded constraints, each a function of ``(x, task)``
    with task 0 online and task 1 offline. Constraint ``j`` is satisfied when
    its value is ``<= thresholds[j]``.
    """

    dimension: int
    objective: object
    constraints: list = field(default_factory=list)
    thresholds: list = field(default_factory=list)
    noise_sd: tuple = (0.1, 0.1)
    sense: str = "min"

    def __post_init__(self):
        if len(self.constraints) != len(self.thresholds):
            raise ValueError("one threshold per constraint")
        if min(self.noise_sd) < 0:
            raise ValueError("noise sd must be nonnegative")
        if self.sense not in ("min", "max"):
            raise ValueError("sense must be 'min' or 'max'")

    @property
    def outcomes(self):
        return ["objective"] + [f"constraint_{j}" for j in range(len(self.constraints))]

    def noiseless(self, x, task=0) -> dict:
        out = {"objective": float(self.objective(x, task))}
        for j, g in enumerate(self.constraints):
            out[f"constraint_{j}"] = float(g(x, task))
        return out

    def evaluate(self, x, task, rng):
        return evaluate(self, x, task, rng)

    def canonical(self, outcome, value):
        """Native value -> maximize / ``>= 0`` feasible form."""
        if outcome == "objective":
            return -value if self.sense == "min" else value
        j = int(outcome.rsplit("_", 1)[1])
        return self.thresholds[j] - value

    def native_objective(self, value):
        return -value if self.sense == "min" else value

    def feasible(self, x, task=0) -> bool:
        v = self.noiseless(x, task)
        return all(v[f"constraint_{j}"] <= t for j, t in enumerate(self.thresholds))


def evaluate(problem: ProblemSpec, x, task, rng) -> dict:
    """Noisy observation of every outcome at ``x``; returns ``{outcome: Observation}``."""
    x = np.asarray(x, dtype=float)
    sd = problem.noise_sd[task]
    out = {}
    for name, v in problem.noiseless(x, task).items():
        y = v + sd * rng.standard_normal() if sd > 0 else v
        out[name] = Observation(tuple(x), task, float(y), sd ** 2)
    return out


def _objective(x, task, t_obj):
    f = hartmann6(x)
    return offline_transform(f, t_obj) if task == 1 else f


def _norm_constraint(x, task, t_con):
    g = float(np.linalg.norm(x))
    return offline_transform(g, t_con) if task == 1 else g


class _Bound:
    """Picklable partial for the evaluators (process pools need it)."""

    def __init__(self, fn, t):
        self.fn, self.t = fn, t

    def __call__(self, x, task):
        return self.fn(x, task, self.t)


def synthetic_problem(noise_sd=0.1, objective_transform=OBJECTIVE_TRANSFORM,
                      constraint_transform=CONSTRAINT_TRANSFORM, threshold=1.25) -> ProblemSpec:
    """Minimize Hartmann-6 subject to ``||x||_2 <= threshold``; the simulator sees both through a bias transform."""
    return ProblemSpec(6, _Bound(_objective, objective_transform), [_Bound(_norm_constraint, constraint_transform)],
                       [threshold], (noise_sd, noise_sd), "min")


@dataclass
class BenchmarkConfig:
    methods: tuple = METHODS
    replicates: int = 30
    n_T: int = 5
    n_S: int = 20
    n_o: int = 20
    batches: int = 4
    noise_sd: float = 0.1
    objective_transform: tuple = (0.75, 0.4, 0.8)
    constraint_transform: tuple = (1.25, 0.8, 4.0)
    threshold: float = 1.25
    anchor_count: int = 5
    fit_restarts: int = 3
    acq_restarts: int = 10
    raw_samples: int = 128
    qmc_samples: int = 64
    thompson_draws: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.methods = tuple(self.methods)
        unknown = set(self.methods) - set(METHODS)
        if not self.methods or unknown:
            raise ValueError(f"methods must be a nonempty subset of {METHODS}")
        if self.replicates < 1 or self.batches < 1 or self.n_T < 1:
            raise ValueError("replicates, batches and n_T must be >= 1")
        if len(self.objective_transform) != 3 or len(self.constraint_transform) != 3:
            raise ValueError("transforms are (m, alpha1, alpha2)")

    def problem(self) -> ProblemSpec:
        return synthetic_problem(self.noise_sd, BiasTransform(*self.objective_transform),
                                 BiasTransform(*self.constraint_transform), self.threshold)

    def loop_config(self, method, replicate) -> LoopConfig:
        common = dict(n_T=self.n_T, K=self.batches - 1, fit_restarts=self.fit_restarts,
                      qmc_samples=self.qmc_samples, acq_restarts=self.acq_restarts, raw_samples=self.raw_samples,
                      thompson_draws=self.thompson_draws, seed=self.seed + replicate)
        if method == "single_task":
            return LoopConfig(n_S=0, n_o=self.n_T, anchor_count=0, interleave=False, **common)
        if method == "mtgp_init_only":
            return LoopConfig(n_S=self.n_S, n_o=self.n_T, anchor_count=0, interleave=False, **common)
        if method == "mtgp_full":
            return LoopConfig(n_S=self.n_S, n_o=self.n_o, anchor_count=self.anchor_count, interleave=True, **common)
        raise ValueError(f"unknown method {method!r}")


def best_feasible_curve(problem: ProblemSpec, online_points) -> np.ndarray:
    """True best feasible objective after each online observation (native sense)."""
    best, out = None, []
    for x in online_points:
        if problem.feasible(x):
            f = problem.noiseless(x)["objective"]
            if best is None or (f < best if problem.sense == "min" else f > best):
                best = f
        out.append(NO_FEASIBLE_VALUE if best is None else best)
    return np.array(out)


def run_replicate(config: BenchmarkConfig, method: str, replicate: int) -> np.ndarray:
    problem = config.problem()
    trace = run_loop(problem, config.loop_config(method, replicate))
    pts = [p for r in trace.online_records() for p in r.policies]
    return best_feasible_curve(problem, pts)


def _job(args):
    config, method, replicate = args
    try:
        return method, replicate, run_replicate(config, method, replicate), None
    except Exception as exc:
        return method, replicate, None, f"{type(exc).__name__}: {exc}"


@dataclass
class ComparisonResult:
    curves: dict
    failures: dict = field(default_factory=dict)
    replicate_ids: dict = field(default_factory=dict)

    def mean(self, method):
        return self.curves[method].mean(axis=0)

    def se(self, method):
        c = self.curves[method]
        if len(c) < 2:
            return np.zeros(c.shape[1])
        return c.std(axis=0, ddof=1) / np.sqrt(len(c))

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "replicate", "iteration", "best_feasible"])
        for method, c in self.curves.items():
            for r, row in zip(self.replicate_ids[method], c):
                for i, v in enumerate(row, start=1):
                    w.writerow([method, r, i, repr(float(v))])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            method: {
                "replicates": int(len(c)),
                "mean": [float(v) for v in self.mean(method)],
                "two_se": [float(2 * v) for v in self.se(method)],
                "final_mean": float(self.mean(method)[-1]),
                "final_se": float(self.se(method)[-1]),
                "failed_replicates": self.failures.get(method, []),
            }
            for method, c in self.curves.items()
        }


def run_comparison(config: BenchmarkConfig, threads=1) -> ComparisonResult:
    """
    Run every method for ``config.replicates`` replicates; replicate ``r``
    uses seed ``config.seed + r`` for all methods, so the initial online
    design is shared across methods.
    """
    if config.replicates < 1:
        raise ValueError("replicates must be >= 1")
    jobs = [(config, m, r) for m in config.methods for r in range(config.replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    curves, ids, failures = {}, {}, {}
    for method in config.methods:
        rows = [(r, c) for m, r, c, err in results if m == method and err is None]
        errs = [(r, err) for m, r, c, err in results if m == method and err is not None]
        if errs:
            if len(errs) >= 0.1 * config.replicates:
                raise RuntimeError(f"{method}: {len(errs)} of {config.replicates} replicates failed: {errs[0][1]}")
            log.warning("%s: excluding %d failed replicates", method, len(errs))
            failures[method] = [r for r, _ in errs]
        ids[method] = [r for r, _ in rows]
        curves[method] = np.array([c for _, c in rows])
    return ComparisonResult(curves, failures, ids)


def summary_json(result: ComparisonResult, config: BenchmarkConfig) -> str:
    return json.dumps({"config": config.__dict__ | {"methods": list(config.methods)}, "methods": result.summary()},
                      indent=2, sort_keys=True, default=list)
