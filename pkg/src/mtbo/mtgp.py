"""
Multi-task GP regression with an ICM kernel.

Observations carry their own (known) noise variance. Each task is standardized
separately before fitting; predictions are returned on the raw scale unless
``standardized=True`` is requested.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.stats import qmc

from .kernels import (
    JITTER,
    MAX_JITTER,
    FixedTasks,
    FreeFactor,
    HyperparamLayout,
    SpatialHyperparams,
    TaskCovariance,
    icm_gram,
)

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class Observation:
    point: tuple
    task: int
    mean: float
    noise_variance: float
    batch: int = 0

    def __post_init__(self):
        p = tuple(float(v) for v in np.atleast_1d(self.point))
        if any(v < 0.0 or v > 1.0 for v in p):
            raise ValueError("observation point must lie in the unit cube")
        if self.noise_variance < 0:
            raise ValueError("noise variance must be nonnegative")
        object.__setattr__(self, "point", p)


class Dataset:
    """Observations of one outcome on one or more tasks, stored column-wise."""

    def __init__(self, X, y, noise, tasks=None, batches=None, outcome="y"):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        n = X.shape[0]
        self.X = X
        self.y = np.asarray(y, dtype=float).reshape(n)
        self.noise = np.broadcast_to(np.asarray(noise, dtype=float), (n,)).copy()
        self.tasks = np.zeros(n, dtype=int) if tasks is None else np.asarray(tasks, dtype=int).reshape(n)
        self.batches = np.zeros(n, dtype=int) if batches is None else np.asarray(batches, dtype=int).reshape(n)
        self.outcome = outcome
        if np.any(self.noise < 0):
            raise ValueError("noise variances must be nonnegative")
        if n and np.any(self.tasks < 0):
            raise ValueError("task ids must be nonnegative")

    @classmethod
    def from_observations(cls, observations, outcome="y"):
        obs = list(observations)
        if not obs:
            raise ValueError("empty observation list")
        dims = {len(o.point) for o in obs}
        if len(dims) != 1:
            raise ValueError("all points must share one dimension")
        return cls(
            [o.point for o in obs],
            [o.mean for o in obs],
            [o.noise_variance for o in obs],
            [o.task for o in obs],
            [o.batch for o in obs],
            outcome,
        )

    @property
    def observations(self):
        return [
            Observation(tuple(x), int(t), float(v), float(e), int(b))
            for x, t, v, e, b in zip(self.X, self.tasks, self.y, self.noise, self.batches)
        ]

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_tasks(self) -> int:
        return int(self.tasks.max()) + 1 if len(self) else 0

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx], self.noise[idx], self.tasks[idx], self.batches[idx], self.outcome)

    def standardization(self):
        """Per-task ``(means, sds)``; a task with no spread gets sd 1."""
        D = self.n_tasks
        means, sds = np.zeros(D), np.ones(D)
        for d in range(D):
            v = self.y[self.tasks == d]
            if v.size:
                means[d] = v.mean()
                s = v.std()
                sds[d] = s if s > 1e-12 * max(1.0, abs(means[d])) else 1.0
        return means, sds

    def to_json(self) -> str:
        obs = [
            {"x": [float(v) for v in x], "task": int(t), "batch": int(b), "y": float(v), "noise_var": float(e)}
            for x, t, b, v, e in zip(self.X, self.tasks, self.batches, self.y, self.noise)
        ]
        return json.dumps({"outcome": self.outcome, "dim": self.dim, "observations": obs})

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        d = json.loads(text)
        obs = d["observations"]
        ds = cls(
            np.array([o["x"] for o in obs], dtype=float).reshape(len(obs), d["dim"]),
            [o["y"] for o in obs],
            [o["noise_var"] for o in obs],
            [o["task"] for o in obs],
            [o.get("batch", 0) for o in obs],
            d.get("outcome", "y"),
        )
        return ds


@dataclass(frozen=True)
class PosteriorPrediction:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def variance(self):
        return np.clip(np.diag(self.covariance), 0.0, None)


def _prepare(dataset: Dataset, standardize: bool):
    if standardize:
        mu, sd = dataset.standardization()
    else:
        D = dataset.n_tasks
        mu, sd = np.zeros(D), np.ones(D)
    t = dataset.tasks
    y = (dataset.y - mu[t]) / sd[t]
    noise = dataset.noise / sd[t] ** 2
    return y, noise, mu, sd


def _sqdiffs(X):
    """Per-dimension squared differences, shape (m, n, n)."""
    d = X.T[:, :, None] - X.T[:, None, :]
    return d * d


@dataclass
class _Factorization:
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    lml: float


def _factorize(Kf, noise, resid):
    n = Kf.shape[0]
    base = max(float(np.mean(np.diag(Kf))), 1e-12) if n else 1.0
    rel = JITTER
    while rel <= MAX_JITTER * (1 + 1e-9):
        jit = rel * base
        K = Kf + np.diag(noise + jit)
        try:
            L = cholesky(K, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            rel *= 10
            continue
        alpha = cho_solve((L, True), resid, check_finite=False)
        lml = -0.5 * resid @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * LOG_2PI
        return _Factorization(L, alpha, jit, float(lml)), rel
    return None, rel


def _lml_and_grad(theta, layout: HyperparamLayout, X, t, y, noise, D2, want_grad=True):
    """Log marginal likelihood and its gradient w.r.t. the packed vector."""
    try:
        h, B, offsets = layout.unpack(theta)
    except (ValueError, FloatingPointError):
        return -np.inf, np.zeros(layout.size), None
    ls2 = h.lengthscales ** 2
    R = np.tensordot(1.0 / ls2, D2, axes=1)
    Ks = h.output_variance * np.exp(-0.5 * R)
    Bm = B.matrix
    Bt = Bm[np.ix_(t, t)]
    Kf = Bt * Ks
    resid = y - offsets[t]
    fac, rel = _factorize(Kf, noise, resid)
    if fac is None or not np.isfinite(fac.lml):
        return -np.inf, np.zeros(layout.size), None
    if not want_grad:
        return fac.lml, None, fac

    n = len(y)
    Kinv = cho_solve((fac.chol, True), np.eye(n), check_finite=False)
    W = 0.5 * (np.outer(fac.alpha, fac.alpha) - Kinv)
    trW = np.trace(W)
    WKf = W * Kf
    grads = []
    if layout.fixed_spatial is None:
        g_tau = WKf.sum() + trW * fac.jitter
        g_ls = np.tensordot(D2, WKf, axes=([1, 2], [0, 1])) / ls2
        grads.append([g_tau])
        grads.append(g_ls)
    # dLML/dB aggregated over task blocks, then through B = L L^T
    D = layout.n_tasks
    E = np.zeros((n, D))
    E[np.arange(n), t] = 1.0
    G = E.T @ (W * Ks) @ E
    counts = E.sum(axis=0)
    G[np.diag_indices(D)] += trW * rel * h.output_variance * counts / n
    G_factor = (G + G.T) @ B.factor
    _, tk, _ = layout.split(theta)
    grads.append(layout.structure.pullback(tk, G_factor))
    if layout.offset_tasks:
        grads.append(np.array([fac.alpha[t == d].sum() for d in layout.offset_tasks]))
    return fac.lml, np.concatenate([np.asarray(g, dtype=float) for g in grads]), fac


def default_layout(dataset: Dataset, rank=None, structure=None, offset_tasks=(), fixed_spatial=None):
    D = dataset.n_tasks
    if structure is None:
        structure = FixedTasks([[1.0]]) if D == 1 else FreeFactor(D, rank)
    if structure.n_tasks != D:
        raise ValueError(f"task structure has {structure.n_tasks} tasks, dataset has {D}")
    return HyperparamLayout(dataset.dim, structure, tuple(offset_tasks), fixed_spatial)


def log_marginal_likelihood(dataset: Dataset, theta, layout: HyperparamLayout | None = None, standardize=True):
    """
    Log density of the (standardized) observations and its analytic gradient.

    Returns ``(-inf, zeros)`` if the Gram matrix cannot be factorized even
    after jitter escalation.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    layout = layout or default_layout(dataset)
    y, noise, _, _ = _prepare(dataset, standardize)
    val, grad, _ = _lml_and_grad(np.asarray(theta, dtype=float), layout, dataset.X, dataset.tasks, y, noise,
                                 _sqdiffs(dataset.X))
    return val, grad


@dataclass(frozen=True, eq=False)
class FittedModel:
    dataset: Dataset
    layout: HyperparamLayout
    theta: np.ndarray
    spatial: SpatialHyperparams
    tasks: TaskCovariance
    offsets: np.ndarray
    lml: float
    standardize: bool
    task_mean: np.ndarray
    task_sd: np.ndarray
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0
    mean_function: float = 0.0

    @property
    def n_tasks(self):
        return self.tasks.n_tasks

    def gram(self):
        """The factorized matrix ``K(X, X) + diag(noise) + jitter`` (standardized units)."""
        return self.chol @ self.chol.T

    def cross(self, tasks, X):
        """Standardized prior covariance between queries and the training data."""
        return icm_gram(tasks, X, self.dataset.tasks, self.dataset.X, self.tasks, self.spatial)

    def predict(self, tasks, X, full_cov=True, standardized=False):
        tasks = np.atleast_1d(np.asarray(tasks, dtype=int))
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if tasks.size == 1 and X.shape[0] > 1:
            tasks = np.full(X.shape[0], tasks[0])
        if X.shape[1] != self.dataset.dim:
            raise ValueError("query dimension mismatch")
        Kq = self.cross(tasks, X)
        mean = self.offsets[tasks] + Kq @ self.alpha
        V = solve_triangular(self.chol, Kq.T, lower=True, check_finite=False)
        if full_cov:
            cov = icm_gram(tasks, X, tasks, X, self.tasks, self.spatial) - V.T @ V
            cov = 0.5 * (cov + cov.T)
        else:
            Bd = self.tasks.matrix[tasks, tasks]
            cov = Bd * self.spatial.output_variance - np.einsum("ij,ij->j", V, V)
        if not standardized:
            s = self.task_sd[tasks]
            mean = self.task_mean[tasks] + s * mean
            cov = cov * (np.outer(s, s) if full_cov else s * s)
        return mean, cov

    def summary(self) -> dict:
        out = {
            "outcome": self.dataset.outcome,
            "n_observations": len(self.dataset),
            "n_tasks": self.n_tasks,
            "log_marginal_likelihood": self.lml,
            "output_variance": self.spatial.output_variance,
            "lengthscales": self.spatial.lengthscales.tolist(),
            "task_covariance": self.tasks.matrix.tolist(),
            "task_offsets": self.offsets.tolist(),
            "task_mean": self.task_mean.tolist(),
            "task_sd": self.task_sd.tolist(),
        }
        if self.n_tasks >= 2:
            out["rho"] = inter_task_correlation(self, 0, 1)
        return out


def build_model(dataset: Dataset, theta=None, layout: HyperparamLayout | None = None, standardize=True, *,
                spatial: SpatialHyperparams | None = None, tasks: TaskCovariance | None = None) -> FittedModel:
    """
    Condition on ``dataset`` with fixed hyperparameters.

    Either pass a packed ``theta`` (with its ``layout``) or give ``spatial``
    and ``tasks`` directly; the latter fixes both.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if theta is None:
        if spatial is None:
            raise ValueError("need theta or spatial hyperparameters")
        tasks = tasks if tasks is not None else TaskCovariance([[1.0]])
        layout = HyperparamLayout(dataset.dim, FixedTasks(tasks.factor), (), spatial)
        theta = np.zeros(0)
    layout = layout or default_layout(dataset)
    if dataset.n_tasks > layout.n_tasks:
        raise ValueError("dataset references more tasks than the kernel has")
    y, noise, mu, sd = _prepare(dataset, standardize)
    D = layout.n_tasks
    mu = np.concatenate([mu, np.zeros(D - len(mu))])
    sd = np.concatenate([sd, np.ones(D - len(sd))])
    val, _, fac = _lml_and_grad(np.asarray(theta, dtype=float), layout, dataset.X, dataset.tasks, y, noise,
                                _sqdiffs(dataset.X), want_grad=False)
    if fac is None:
        raise FitError("factorization failed at the given hyperparameters")
    h, B, offsets = layout.unpack(theta)
    return FittedModel(dataset, layout, np.asarray(theta, dtype=float).copy(), h, B, offsets, val, standardize,
                       mu, sd, fac.chol, fac.alpha, fac.jitter)


def _start_points(layout, n, seed):
    lo, hi = layout.start_box()
    if n <= 0:
        return np.zeros((0, layout.size))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        u = qmc.Sobol(layout.size, scramble=True, seed=seed).random(n)
    return lo + u * (hi - lo)


def fit(dataset: Dataset, rank=None, restarts=10, seed=0, *, structure=None, offset_tasks=(), init=None,
        fixed_spatial=None, standardize=True, maxiter=200) -> FittedModel:
    """
    Maximize the log marginal likelihood with L-BFGS-B from ``restarts``
    starting points (any ``init`` vectors first, then scrambled Sobol points).
    """
    if len(dataset) < 2:
        raise ValueError("need at least two observations to fit")
    layout = default_layout(dataset, rank, structure, offset_tasks, fixed_spatial)
    for d in range(dataset.n_tasks):
        if not np.any(dataset.tasks == d):
            raise ValueError(f"task {d} has no observations")
    y, noise, _, _ = _prepare(dataset, standardize)
    X, t = dataset.X, dataset.tasks
    D2 = _sqdiffs(X)
    if layout.size == 0:
        return build_model(dataset, np.zeros(0), layout, standardize)

    inits = [np.asarray(v, dtype=float) for v in (init or []) if np.shape(v) == (layout.size,)]
    starts = inits[:restarts] + list(_start_points(layout, max(restarts - len(inits), 0), seed))
    bounds = layout.bounds()
    lo = np.array([b[0] if b[0] is not None else -np.inf for b in bounds])
    hi = np.array([b[1] if b[1] is not None else np.inf for b in bounds])

    def objective(theta):
        val, grad, _ = _lml_and_grad(theta, layout, X, t, y, noise, D2)
        if not np.isfinite(val):
            return 1e25, np.zeros_like(theta)
        return -val, -grad

    best_theta, best_val = None, -np.inf
    for x0 in starts:
        x0 = np.clip(x0, lo, hi)
        v0, _ = objective(x0)
        if v0 >= 1e25:
            continue
        res = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": maxiter})
        val = -res.fun
        if np.isfinite(val) and val > best_val and res.fun < 1e25:
            best_theta, best_val = res.x, val
    if best_theta is None:
        raise FitError("fit failed")
    return build_model(dataset, best_theta, layout, standardize)


def posterior(model: FittedModel, queries, standardized=False) -> PosteriorPrediction:
    """Joint posterior over ``queries``, a sequence of ``(task, point)`` pairs."""
    tasks = np.array([q[0] for q in queries], dtype=int)
    X = np.array([np.atleast_1d(q[1]) for q in queries], dtype=float)
    mean, cov = model.predict(tasks, X, full_cov=True, standardized=standardized)
    return PosteriorPrediction(mean, cov)


def inter_task_correlation(model: FittedModel, d: int, d2: int) -> float:
    B = model.tasks.matrix if isinstance(model, FittedModel) else np.asarray(model)
    v = B[d, d] * B[d2, d2]
    if not v > 0:
        raise ValueError("degenerate task: zero task variance")
    return float(np.clip(B[d, d2] / np.sqrt(v), -1.0, 1.0))


@dataclass
class LOOResult:
    mean: np.ndarray
    variance: np.ndarray
    actual: np.ndarray
    mse: float


def loo_cross_validation(dataset: Dataset, target_task=0, rank=None, restarts=10, seed=0, **fit_kwargs) -> LOOResult:
    """
    Leave one target-task observation out at a time, refit on the rest, and
    predict it. Values are reported on the standardized scale of the full
    target-task data.
    """
    idx = np.flatnonzero(dataset.tasks == target_task)
    if idx.size < 3:
        raise ValueError("target task needs at least three observations")
    full = fit(dataset, rank, restarts, seed, **fit_kwargs)
    mu, sd = dataset.standardization()
    m, s = mu[target_task], sd[target_task]
    means, vars_, actual = [], [], []
    for k, i in enumerate(idx):
        keep = np.setdiff1d(np.arange(len(dataset)), [i])
        model = fit(dataset.subset(keep), rank, restarts, seed + 1 + k, init=[full.theta], **fit_kwargs)
        pm, pv = model.predict([target_task], dataset.X[i:i + 1], full_cov=False)
        means.append((pm[0] - m) / s)
        vars_.append(max(pv[0], 0.0) / s ** 2)
        actual.append((dataset.y[i] - m) / s)
    means, vars_, actual = map(np.asarray, (means, vars_, actual))
    return LOOResult(means, vars_, actual, float(np.mean((means - actual) ** 2)))
