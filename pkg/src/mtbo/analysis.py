"""
Learning curves for single- and two-task GPs, the lower bound on the two-task
curve built from single-task curves, and the kernel-transfer experiment.

Curve estimators subsample a dataset many times, fit (or condition) a model
on the subsample and score it on held-out online points. Two quantities are
recorded per replicate, both averaged over the held-out points:

* ``mse``: ``(y - mean)^2 - noise_var``, an unbiased estimate of the squared
  error against the latent function value;
* ``var``: the posterior variance of the latent function.

Under a correctly specified model the two agree in expectation.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .kernels import SpatialHyperparams, TaskCovariance, FreeFactor, icm_gram
from .mtgp import Dataset, build_model, fit

TWO_TASK = FreeFactor(2)


@dataclass(frozen=True)
class LearningCurvePoint:
    n_T: int
    n_S: int
    mean_mse: float
    mse_se: float
    mean_predictive_variance: float
    variance_se: float
    replicates: int


@dataclass(frozen=True)
class SingleTaskCurve:
    """Mean held-out predictive variance by training-set size ``n``."""

    n: tuple
    mean_variance: tuple
    stderr: tuple

    def __post_init__(self):
        n = tuple(int(v) for v in self.n)
        if any(b <= a for a, b in zip(n, n[1:])):
            raise ValueError("n values must be strictly increasing")
        if not len(n) == len(self.mean_variance) == len(self.stderr):
            raise ValueError("curve columns have different lengths")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "mean_variance", tuple(float(v) for v in self.mean_variance))
        object.__setattr__(self, "stderr", tuple(float(v) for v in self.stderr))

    def at(self, n) -> float:
        """Linear interpolation; raises outside the measured range."""
        if not self.n[0] <= n <= self.n[-1]:
            raise ValueError("insufficient curve support")
        return float(np.interp(n, self.n, self.mean_variance))


def _mean_se(values):
    v = np.asarray(values, dtype=float)
    se = v.std(ddof=1) / np.sqrt(v.size) if v.size >= 2 else 0.0
    return float(v.mean()), float(se)


def _task_scales(dataset: Dataset):
    """Per-task mean and sd over the full dataset, before any subsampling."""
    D = dataset.n_tasks
    mu, sd = np.zeros(max(D, 2)), np.ones(max(D, 2))
    for d in range(D):
        y = dataset.y[dataset.tasks == d]
        if y.size:
            mu[d] = y.mean()
            s = y.std()
            sd[d] = s if s > 0 else 1.0
    return mu, sd


def _rescaled(dataset: Dataset, mu, sd) -> Dataset:
    t = dataset.tasks
    return Dataset(dataset.X, (dataset.y - mu[t]) / sd[t], dataset.noise / sd[t] ** 2, t, dataset.batches,
                   dataset.outcome)


def _score(model, test: Dataset, scale2=1.0):
    """(mse, var) of task-0 predictions at the points of ``test``."""
    mean, var = model.predict(np.zeros(len(test), dtype=int), test.X, full_cov=False, standardized=True)
    err = (test.y - mean) ** 2 - test.noise
    return float(err.mean()) * scale2, float(np.mean(var)) * scale2


def _fixed_model(train: Dataset, fixed):
    h, B = fixed
    return build_model(train, standardize=False, spatial=h, tasks=B)


def _fit_model(train: Dataset, restarts, seed):
    if train.n_tasks >= 2:
        return fit(train, restarts=restarts, seed=seed, structure=TWO_TASK, standardize=False)
    return fit(train, restarts=restarts, seed=seed, standardize=False)


def empirical_learning_curve(dataset: Dataset, grid, replicates=500, seed=0, *, fixed=None, restarts=3):
    """
    Two-task learning curve at each ``(n_T, n_S)`` in ``grid``.

    Task 0 of ``dataset`` is online, task 1 offline. Each replicate draws
    ``n_T`` online and ``n_S`` offline points without replacement, fits a
    two-task model (or a single-task one when ``n_S == 0``) and scores it on
    the online points that were not drawn.

    ``fixed=(SpatialHyperparams, TaskCovariance)`` skips inference and
    conditions on the raw data; otherwise each task is rescaled by its
    full-data mean and sd before fitting and results are reported in the
    original units.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    online = np.flatnonzero(dataset.tasks == 0)
    offline = np.flatnonzero(dataset.tasks == 1)
    grid = [(int(a), int(b)) for a, b in grid]
    for n_T, n_S in grid:
        if n_T < 0 or n_S < 0 or n_T + n_S == 0:
            raise ValueError(f"invalid grid point {(n_T, n_S)}")
        if n_T >= online.size or n_S > offline.size:
            raise ValueError(f"grid point {(n_T, n_S)} needs more data than available "
                             f"({online.size} online, {offline.size} offline)")
    if fixed is None:
        mu, sd = _task_scales(dataset)
        data, scale2 = _rescaled(dataset, mu, sd), sd[0] ** 2
    else:
        data, scale2 = dataset, 1.0
    rng = np.random.default_rng(seed)
    out = []
    for n_T, n_S in grid:
        mses, vars_ = [], []
        for _ in range(replicates):
            perm = rng.permutation(online)
            tr = np.concatenate([perm[:n_T], rng.choice(offline, n_S, replace=False)])
            train = data.subset(tr)
            if fixed is not None:
                model = _fixed_model(train, fixed)
            else:
                model = _fit_model(train, restarts, int(rng.integers(2 ** 31)))
            m, v = _score(model, data.subset(perm[n_T:]), scale2)
            mses.append(m)
            vars_.append(v)
        mm, ms = _mean_se(mses)
        mv, vs = _mean_se(vars_)
        out.append(LearningCurvePoint(n_T, n_S, mm, ms, mv, vs, replicates))
    return out


def generative_learning_curve(grid, replicates=200, seed=0, *, n_online=20, n_offline=100, dim=3, rho=0.9,
                              spatial: SpatialHyperparams | None = None, noise_var=0.01, fixed=True, restarts=3):
    """
    Learning curve averaged over fresh draws from a two-task ICM prior: each
    replicate samples a new dataset with :func:`sample_icm_dataset` and
    scores one subsample per grid point. With ``fixed`` the generating
    hyperparameters are used for prediction.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    spatial = spatial or SpatialHyperparams(1.0, np.full(dim, 0.5))
    B = correlation_covariance(rho)
    acc = {tuple(g): ([], []) for g in grid}
    for child in np.random.SeedSequence(seed).spawn(replicates):
        s_data, s_sub = (int(v) for v in child.generate_state(2))
        ds = sample_icm_dataset(n_online, n_offline, dim, rho, spatial, noise_var, s_data)
        pts = empirical_learning_curve(ds, grid, 1, s_sub, fixed=(spatial, B) if fixed else None, restarts=restarts)
        for g, p in zip(acc, pts):
            acc[g][0].append(p.mean_mse)
            acc[g][1].append(p.mean_predictive_variance)
    out = []
    for (n_T, n_S), (mses, vars_) in acc.items():
        mm, ms = _mean_se(mses)
        mv, vs = _mean_se(vars_)
        out.append(LearningCurvePoint(int(n_T), int(n_S), mm, ms, mv, vs, replicates))
    return out


def single_task_learning_curve(dataset: Dataset, n_grid, replicates=500, seed=0, *, fixed=None, restarts=3,
                               holdout="rest") -> SingleTaskCurve:
    """
    Single-task learning curve of ``dataset`` (task labels are ignored).

    Per replicate one random permutation is drawn and the first ``n`` points
    train the model, so training sets are nested across the grid.
    ``holdout="rest"`` scores on the remaining points; ``holdout="common"``
    scores every ``n`` on the points left over after the largest ``n``,
    which together with ``fixed`` hyperparameters makes the curve exactly
    non-increasing.
    """
    n_grid = sorted(int(n) for n in n_grid)
    N = len(dataset)
    if not n_grid or n_grid[0] < 1 or n_grid[-1] >= N:
        raise ValueError(f"grid values must lie in [1, {N - 1}]")
    if holdout not in ("rest", "common"):
        raise ValueError("holdout must be 'rest' or 'common'")
    base = Dataset(dataset.X, dataset.y, dataset.noise, np.zeros(N, dtype=int), None, dataset.outcome)
    if fixed is None:
        mu, sd = _task_scales(base)
        base, scale2 = _rescaled(base, mu, sd), sd[0] ** 2
    else:
        scale2 = 1.0
    rng = np.random.default_rng(seed)
    per_n = {n: [] for n in n_grid}
    for _ in range(replicates):
        perm = rng.permutation(N)
        for n in n_grid:
            train = base.subset(perm[:n])
            test = base.subset(perm[n_grid[-1]:] if holdout == "common" else perm[n:])
            if fixed is not None:
                model = _fixed_model(train, fixed)
            else:
                model = fit(train, restarts=restarts, seed=int(rng.integers(2 ** 31)), standardize=False)
            per_n[n].append(_score(model, test, scale2)[1])
    stats = [_mean_se(per_n[n]) for n in n_grid]
    return SingleTaskCurve(tuple(n_grid), tuple(s[0] for s in stats), tuple(s[1] for s in stats))


def chai_bound(single_curve: SingleTaskCurve, rho, n_T, n_S) -> float:
    """``rho^2 eps(n_T + n_S) + (1 - rho^2) eps(n_T)`` from a single-task curve ``eps``."""
    if not -1.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [-1, 1]")
    r2 = rho * rho
    return r2 * single_curve.at(n_T + n_S) + (1.0 - r2) * single_curve.at(n_T)


def correlation_covariance(rho) -> TaskCovariance:
    """Unit-variance two-task covariance ``[[1, rho], [rho, 1]]``."""
    return TaskCovariance([[1.0, 0.0], [rho, np.sqrt(max(0.0, 1.0 - rho * rho))]])


def _task0_variance(h, X_T, X_S, x_star, rho, noise_var):
    X = np.vstack([X_T, X_S])
    t = np.r_[np.zeros(len(X_T), dtype=int), np.ones(len(X_S), dtype=int)]
    ds = Dataset(X, np.zeros(len(X)), np.full(len(X), noise_var), t)
    model = build_model(ds, standardize=False, spatial=h, tasks=correlation_covariance(rho))
    return float(model.predict([0], np.atleast_2d(x_star), full_cov=False, standardized=True)[1][0])


def verify_proposition_bound(h: SpatialHyperparams, X_T, X_S, x_star, rho, noise_var=0.01, slack=1e-8):
    """
    Check that the online posterior variance at ``x_star`` is at least the
    ``rho^2``-weighted mix of its values at correlation 1 and 0, all with
    fixed hyperparameters and unit task variances.

    Returns ``(lhs, rhs, holds)``.
    """
    X_T = np.atleast_2d(np.asarray(X_T, dtype=float))
    X_S = np.asarray(X_S, dtype=float).reshape(-1, X_T.shape[1])
    lhs = _task0_variance(h, X_T, X_S, x_star, rho, noise_var)
    v1 = _task0_variance(h, X_T, X_S, x_star, 1.0, noise_var)
    v0 = _task0_variance(h, X_T, X_S, x_star, 0.0, noise_var)
    r2 = rho * rho
    rhs = r2 * v1 + (1.0 - r2) * v0
    return lhs, rhs, bool(lhs >= rhs - slack)


def proposition_battery(n_instances=500, dim=3, seed=0, max_points=8):
    """Randomized instances of :func:`verify_proposition_bound`; returns the list of results."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_instances):
        h = SpatialHyperparams(rng.uniform(0.2, 3.0), rng.uniform(0.1, 1.5, dim))
        X_T = rng.random((rng.integers(1, max_points + 1), dim))
        X_S = rng.random((rng.integers(0, max_points + 1), dim))
        out.append(verify_proposition_bound(h, X_T, X_S, rng.random(dim), rng.uniform(-1, 1),
                                            rng.uniform(1e-3, 0.5)))
    return out


def sample_icm_dataset(n_online, n_offline, dim, rho, spatial: SpatialHyperparams | None = None, noise_var=0.01,
                       seed=0, offline_scale=1.0) -> Dataset:
    """
    Draw uniform points in the unit cube and a joint sample from a two-task
    ICM prior (online variance 1, offline ``offline_scale^2``, correlation
    ``rho``), plus Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    spatial = spatial or SpatialHyperparams(1.0, np.full(dim, 0.5))
    X = rng.random((n_online + n_offline, dim))
    t = np.r_[np.zeros(n_online, dtype=int), np.ones(n_offline, dtype=int)]
    L = np.diag([1.0, offline_scale]) @ correlation_covariance(rho).factor
    K = icm_gram(t, X, t, X, TaskCovariance(L), spatial)
    C = np.linalg.cholesky(K + 1e-9 * np.mean(np.diag(K)) * np.eye(len(X)))
    f = C @ rng.standard_normal(len(X))
    y = f + np.sqrt(noise_var) * rng.standard_normal(len(X))
    return Dataset(X, y, np.full(len(X), noise_var), t)


def kernel_transfer_curves(online: Dataset, offline: Dataset, n_T_grid, replicates=500, seed=0, *, restarts=3,
                           force_diagonal=False):
    """
    Online learning curves for three models, each scored on held-out online
    points:

    ``inferred``: single-task GP with its kernel fitted to the subsample;
    ``offline_kernel``: single-task GP using the kernel fitted once to all of
    ``offline``; ``mtgp``: two-task model on the subsample plus all offline
    data. With ``force_diagonal`` the two-task model keeps the offline kernel
    and an identity task covariance, so it ignores the offline data.

    Returns ``{name: [LearningCurvePoint, ...]}``.
    """
    n_T_grid = sorted(int(n) for n in n_T_grid)
    N, M = len(online), len(offline)
    if not n_T_grid or n_T_grid[0] < 1 or n_T_grid[-1] >= N:
        raise ValueError(f"n_T values must lie in [1, {N - 1}]")
    if M < 2:
        raise ValueError("need at least two offline points to fit a kernel")
    on = Dataset(online.X, online.y, online.noise, np.zeros(N, dtype=int), None, online.outcome)
    off = Dataset(offline.X, offline.y, offline.noise, np.zeros(M, dtype=int), None, offline.outcome)
    mu_on, sd_on = _task_scales(on)
    mu_off, sd_off = _task_scales(off)
    on = _rescaled(on, mu_on, sd_on)
    off = _rescaled(off, mu_off, sd_off)
    scale2 = sd_on[0] ** 2
    rng = np.random.default_rng(seed)
    h_off = fit(off, restarts=restarts, seed=int(rng.integers(2 ** 31)), standardize=False).spatial
    off_task = Dataset(off.X, off.y, off.noise, np.ones(M, dtype=int))
    names = ("inferred", "offline_kernel", "mtgp")
    acc = {(name, n): ([], []) for name in names for n in n_T_grid}
    for _ in range(replicates):
        perm = rng.permutation(N)
        for n in n_T_grid:
            train, test = on.subset(perm[:n]), on.subset(perm[n:])
            joint = Dataset(np.vstack([train.X, off_task.X]), np.r_[train.y, off_task.y],
                            np.r_[train.noise, off_task.noise], np.r_[train.tasks, off_task.tasks])
            models = {
                "inferred": fit(train, restarts=restarts, seed=int(rng.integers(2 ** 31)), standardize=False),
                "offline_kernel": build_model(train, standardize=False, spatial=h_off),
            }
            if force_diagonal:
                models["mtgp"] = build_model(joint, standardize=False, spatial=h_off, tasks=TaskCovariance(np.eye(2)))
            else:
                models["mtgp"] = fit(joint, restarts=restarts, seed=int(rng.integers(2 ** 31)), structure=TWO_TASK,
                                     standardize=False)
            for name in names:
                m, v = _score(models[name], test, scale2)
                acc[name, n][0].append(m)
                acc[name, n][1].append(v)
    out = {}
    for name in names:
        pts = []
        for n in n_T_grid:
            mm, ms = _mean_se(acc[name, n][0])
            mv, vs = _mean_se(acc[name, n][1])
            pts.append(LearningCurvePoint(n, M if name == "mtgp" else 0, mm, ms, mv, vs, replicates))
        out[name] = pts
    return out


def curve_csv(points) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n_T", "n_S", "mean_mse", "mse_se", "mean_var", "var_se"])
    for p in points:
        w.writerow([p.n_T, p.n_S, repr(p.mean_mse), repr(p.mse_se), repr(p.mean_predictive_variance),
                    repr(p.variance_se)])
    return buf.getvalue()


def bound_csv(rows, sweep="n_S") -> str:
    """``rows`` of ``(sweep value, empirical, bound)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([sweep, "empirical", "bound"])
    for s, e, b in rows:
        w.writerow([int(s), repr(float(e)), repr(float(b))])
    return buf.getvalue()
