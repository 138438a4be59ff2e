"""
Constrained noisy expected improvement, batch generation and Thompson
sampling selection.

All models are queried on task 0 (the online task) and on the raw outcome
scale. The objective is maximized and each constraint is feasible when
``c(x) >= 0``.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.special import ndtr
from scipy.stats import norm, qmc

from .mtgp import FittedModel

log = logging.getLogger(__name__)

ONLINE = 0


@dataclass
class ModelSet:
    objective: FittedModel
    constraints: list = field(default_factory=list)

    @property
    def models(self):
        return [self.objective, *self.constraints]

    def online_points(self):
        ds = self.objective.dataset
        return np.unique(ds.X[ds.tasks == ONLINE], axis=0)


@dataclass(frozen=True)
class QMCConfig:
    sample_count: int = 64
    sequence_seed: int = 0

    def __post_init__(self):
        if self.sample_count < 8:
            raise ValueError("sample_count must be at least 8")


@dataclass
class AcquisitionValue:
    value: float
    samples: np.ndarray


def base_samples(qmc_config: QMCConfig, n_models: int, n_points: int):
    """Standard-normal qMC draws of shape ``(S, n_models, n_points)``."""
    S = qmc_config.sample_count
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        u = qmc.Sobol(n_models * n_points, scramble=True, seed=qmc_config.sequence_seed).random(S)
    z = norm.ppf(np.clip(u, 1e-10, 1 - 1e-10))
    return z.reshape(S, n_models, n_points)


def _robust_chol(C):
    base = max(float(np.mean(np.diag(C))), 1e-300)
    for rel in (1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4):
        try:
            return cholesky(C + rel * base * np.eye(len(C)), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
    w, V = np.linalg.eigh(C)
    return V * np.sqrt(np.clip(w, 0, None))


_INV_SQRT_2PI = 1.0 / np.sqrt(2 * np.pi)


def _pdf(u):
    return _INV_SQRT_2PI * np.exp(-0.5 * u * u)


def _ei(m, s):
    u = m / s
    cdf, pdf = ndtr(u), _pdf(u)
    return s * pdf + m * cdf, cdf, pdf


class _OnlineSurface:
    """Posterior of one model at task 0, jointly with a fixed point set ``Z``."""

    def __init__(self, model: FittedModel, Z, zeta):
        self.m = model
        self.Z = Z
        ds = model.dataset
        self.X = ds.X
        h, B = model.spatial, model.tasks.matrix
        self.ls2 = h.lengthscales ** 2
        self.b_row = h.output_variance * B[ONLINE, ds.tasks]
        self.b00 = h.output_variance * B[ONLINE, ONLINE]
        self.mu0, self.sd0 = model.task_mean[ONLINE], model.task_sd[ONLINE]
        self.off0 = model.offsets[ONLINE]
        mean_Z, cov_Z = model.predict(np.zeros(len(Z), dtype=int), Z)
        self.LZ = _robust_chol(cov_Z)
        self.LZinv = solve_triangular(self.LZ, np.eye(len(Z)), lower=True)
        Linv = solve_triangular(model.chol, np.eye(len(ds)), lower=True)
        self.Kinv = Linv.T @ Linv
        Kzd = model.cross(np.zeros(len(Z), dtype=int), Z)
        self.A = Kzd @ self.Kinv
        self.zeta = zeta                      # (S, nZ)
        self.samples = mean_Z + zeta @ self.LZ.T

    def _kern(self, X1, X2):
        d = (X1[:, None, :] - X2[None, :, :]) / np.sqrt(self.ls2)
        return np.exp(-0.5 * np.einsum("ijk,ijk->ij", d, d))

    def evaluate(self, x, grad=False):
        """Per-sample conditional means ``(S, q)`` and the shared variance ``(q,)``, plus gradients."""
        m = self.m
        kx = self.b_row * self._kern(x, self.X)                     # (q, n)
        v = kx @ self.Kinv                                          # (q, n)
        mu = self.mu0 + self.sd0 * (self.off0 + kx @ m.alpha)
        var = self.sd0 ** 2 * (self.b00 - (kx * v).sum(axis=1))
        kzx = self.b00 * self._kern(self.Z, x)                     # (nZ, q)
        sig = self.sd0 ** 2 * (kzx - self.A @ kx.T)
        W = self.LZinv @ sig
        means = mu[None, :] + self.zeta @ W
        raw_cvar = var - (W * W).sum(axis=0)
        cvar = np.maximum(raw_cvar, 1e-18)
        if not grad:
            return means, cvar, None, None
        q, dim = x.shape
        nZ = len(self.Z)
        dkx = kx[:, :, None] * ((self.X[None, :, :] - x[:, None, :]) / self.ls2)        # (q, n, dim)
        dmu = self.sd0 * np.einsum("qnj,n->qj", dkx, m.alpha)
        dvar = -2 * self.sd0 ** 2 * np.einsum("qnj,qn->qj", dkx, v)
        dkzx = kzx[:, :, None] * ((self.Z[:, None, :] - x[None, :, :]) / self.ls2)     # (nZ, q, dim)
        Adkx = (self.A @ dkx.transpose(1, 0, 2).reshape(len(self.X), q * dim)).reshape(nZ, q, dim)
        dsig = self.sd0 ** 2 * (dkzx - Adkx)
        dW = (self.LZinv @ dsig.reshape(nZ, q * dim)).reshape(nZ, q, dim)
        dmeans = dmu[None] + (self.zeta @ dW.reshape(nZ, q * dim)).reshape(-1, q, dim)
        dcvar = dvar - 2 * np.einsum("zq,zqj->qj", W, dW)
        dcvar = np.where((raw_cvar > 1e-18)[:, None], dcvar, 0.0)
        return means, cvar, dmeans, dcvar


class NoisyEI:
    """
    Noisy EI with constraints, estimated with fixed qMC base samples.

    Each base sample fixes a joint draw of the objective and constraints at the
    online points (plus any pending points); conditioned on that draw, the
    improvement at ``x`` is analytic. Samples with no feasible point
    contribute the probability of feasibility at ``x`` instead.
    """

    def __init__(self, models: ModelSet, online_points, qmc_config: QMCConfig = QMCConfig(), pending=None,
                 base=None):
        X_T = np.atleast_2d(np.asarray(online_points, dtype=float))
        if X_T.shape[0] == 0:
            raise ValueError("need at least one online point")
        X_T = X_T[np.lexsort(X_T.T[::-1])]
        Z = X_T if pending is None or len(pending) == 0 else np.vstack([X_T, np.atleast_2d(pending)])
        n_models = len(models.models)
        if base is None:
            base = base_samples(qmc_config, n_models, len(Z))
        if base.shape[1] < n_models or base.shape[2] < len(Z):
            raise ValueError("base samples too small for the joint point set")
        self.Z = Z
        self.surfaces = [_OnlineSurface(m, Z, base[:, j, :len(Z)]) for j, m in enumerate(models.models)]
        F = self.surfaces[0].samples
        feas = np.ones_like(F, dtype=bool)
        for s in self.surfaces[1:]:
            feas &= s.samples >= 0
        self.has_feasible = feas.any(axis=1)
        self.best = np.where(self.has_feasible, np.max(np.where(feas, F, -np.inf), axis=1), 0.0)

    def _inner(self, x, grad):
        S = len(self.best)
        means, cvar, dm, dv = self.surfaces[0].evaluate(x, grad)
        sd = np.sqrt(cvar)
        ei, cdf, pdf = _ei(means - self.best[:, None], sd[None, :])
        probs, dprobs = [], []
        for surf in self.surfaces[1:]:
            cm, cv, dcm, dcv = surf.evaluate(x, grad)
            cs = np.sqrt(cv)
            u = cm / cs
            probs.append(ndtr(u))
            if grad:
                phi = _pdf(u)[..., None]
                dcs = dcv / (2 * cs[:, None])
                dprobs.append(phi * (dcm / cs[None, :, None] - u[..., None] * dcs[None] / cs[None, :, None]))
        P = np.ones((S, x.shape[0]))
        for p in probs:
            P = P * p
        inner = np.where(self.has_feasible[:, None], ei * P, P)
        if not grad:
            return inner, None
        ds_ = dv / (2 * sd[:, None])
        dei = cdf[..., None] * dm + pdf[..., None] * ds_[None]
        dP = np.zeros((S,) + dm.shape[1:])
        for j, dp in enumerate(dprobs):
            others = np.ones_like(P)
            for k, p in enumerate(probs):
                if k != j:
                    others = others * p
            dP += others[..., None] * dp
        dinner = np.where(self.has_feasible[:, None, None], dei * P[..., None] + ei[..., None] * dP, dP)
        return inner, dinner

    def values(self, X, chunk=256):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = [self._inner(X[i:i + chunk], False)[0].mean(axis=0) for i in range(0, len(X), chunk)]
        return np.concatenate(out)

    def value_and_grad(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        inner, dinner = self._inner(X, True)
        return inner.mean(axis=0), dinner.mean(axis=0)

    def __call__(self, x) -> AcquisitionValue:
        inner, _ = self._inner(np.atleast_2d(np.asarray(x, dtype=float)), False)
        return AcquisitionValue(float(inner[:, 0].mean()), inner[:, 0])


def noisy_ei(x, models: ModelSet, online_points, qmc_config: QMCConfig = QMCConfig()) -> AcquisitionValue:
    return NoisyEI(models, online_points, qmc_config)(x)


def _sobol(n, dim, seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return qmc.Sobol(dim, scramble=True, seed=seed).random(n)


def maximize_acquisition(acq: NoisyEI, lo, hi, restarts=20, raw_samples=256, seed=0):
    """Multi-start L-BFGS-B; the starts are the best points of a scrambled Sobol set."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    if np.all(hi - lo <= 0):
        return lo.copy(), float(acq.values(lo[None])[0])
    dim = lo.size
    raw = lo + _sobol(max(raw_samples, restarts), dim, seed) * (hi - lo)
    vals = acq.values(raw)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("non-finite acquisition values")
    order = np.argsort(-vals, kind="stable")[:restarts]
    X0 = raw[order]
    scale = 1.0 / max(float(vals[order[0]]), 1e-12)

    def f(z):
        v, g = acq.value_and_grad(z.reshape(-1, dim))
        return -scale * v.sum(), -scale * g.ravel()

    res = minimize(f, X0.ravel(), jac=True, method="L-BFGS-B", bounds=list(zip(np.tile(lo, len(X0)),
                                                                              np.tile(hi, len(X0)))),
                   options={"maxiter": 100})
    X = np.clip(res.x.reshape(-1, dim), lo, hi)
    v = acq.values(X)
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("optimizer returned non-finite values")
    i = int(np.argmax(v))
    if v[i] >= vals[order[0]]:
        return X[i], float(v[i])
    return X0[0], float(vals[order[0]])


def generate_candidates(models: ModelSet, bounds, n_o: int, qmc_config: QMCConfig = QMCConfig(), seed=0,
                        online_points=None, restarts=20, raw_samples=256, max_retries=3):
    """
    Sequential-greedy batch of ``n_o`` points. Each new point is appended to
    the joint sample set, so later points see its sampled value as a
    potential incumbent.
    """
    if n_o < 1:
        raise ValueError("n_o must be at least 1")
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    X_T = models.online_points() if online_points is None else np.atleast_2d(online_points)
    base = base_samples(qmc_config, len(models.models), len(X_T) + n_o)
    rng = np.random.default_rng(seed)
    degenerate = np.all(hi - lo <= 0)
    cands = []
    for _ in range(n_o):
        acq = NoisyEI(models, X_T, qmc_config, pending=np.array(cands) if cands else None, base=base)
        for attempt in range(max_retries):
            try:
                x, _ = maximize_acquisition(acq, lo, hi, restarts, raw_samples, int(rng.integers(2 ** 31)))
                break
            except FloatingPointError:
                log.warning("acquisition optimization failed (attempt %d), retrying", attempt + 1)
        else:
            raise RuntimeError("acquisition optimization failed repeatedly")
        if cands and not degenerate:
            while min(np.linalg.norm(np.array(cands) - x, axis=1)) < 1e-6:
                x = np.clip(x + rng.normal(scale=1e-5, size=x.shape), lo, hi)
        cands.append(x)
    return np.array(cands)


def _joint_draws(model, X, draws, rng):
    mean, cov = model.predict(np.zeros(len(X), dtype=int), X)
    L = _robust_chol(cov)
    return mean, mean + rng.standard_normal((draws, len(X))) @ L.T


def thompson_select(models: ModelSet, candidates, n_T: int, draws=1000, seed=0):
    """
    Indices of ``n_T`` candidates chosen greedily by how often each is the
    best feasible candidate in joint posterior draws (recounted among the
    remaining candidates after every pick).
    """
    C = np.atleast_2d(np.asarray(candidates, dtype=float))
    if n_T > len(C):
        raise ValueError("n_T exceeds the number of candidates")
    rng = np.random.default_rng(seed)
    obj_mean, F = _joint_draws(models.objective, C, draws, rng)
    slack = np.full(F.shape, np.inf)
    for m in models.constraints:
        slack = np.minimum(slack, _joint_draws(m, C, draws, rng)[1])
    feas = slack >= 0
    remaining = list(range(len(C)))
    chosen = []
    while len(chosen) < n_T:
        r = np.array(remaining)
        f, fe, sl = F[:, r], feas[:, r], slack[:, r]
        any_feas = fe.any(axis=1)
        win = np.where(any_feas, np.argmax(np.where(fe, f, -np.inf), axis=1), np.argmax(sl, axis=1))
        wins = np.bincount(win, minlength=len(r))
        pick = min(range(len(r)), key=lambda k: (-wins[k], -obj_mean[r[k]], r[k]))
        chosen.append(int(r[pick]))
        remaining.remove(int(r[pick]))
    return chosen


def best_feasible(models: ModelSet, online_points=None):
    """``(point, expected objective)`` of the best online point feasible in expectation, or None."""
    X = models.online_points() if online_points is None else np.atleast_2d(online_points)
    zeros = np.zeros(len(X), dtype=int)
    f, _ = models.objective.predict(zeros, X, full_cov=False)
    ok = np.ones(len(X), dtype=bool)
    for m in models.constraints:
        ok &= m.predict(zeros, X, full_cov=False)[0] >= 0
    if not ok.any():
        return None
    i = np.flatnonzero(ok)[np.argmax(f[ok])]
    return X[i], float(f[i])
