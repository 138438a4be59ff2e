"""
Spatial (ARD RBF) and multi-task (ICM) covariance functions.

The task covariance is always carried as a factor ``L`` with ``B = L L^T`` so
that positive semidefiniteness holds by construction. Task *structures* map a
flat parameter vector onto that factor and pull gradients back through it;
:class:`HyperparamLayout` fixes the packing order of the full hyperparameter
vector used during fitting::

    [log tau^2, log l_1, ..., log l_m, task params..., mean offsets...]
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

JITTER = 1e-6
MAX_JITTER = 1e-2
LOG_LENGTHSCALE_BOUNDS = (float(np.log(0.01)), float(np.log(100.0)))
LOG_OUTPUTSCALE_BOUNDS = (float(np.log(1e-4)), float(np.log(1e4)))


@dataclass(frozen=True)
class SpatialHyperparams:
    """Output variance ``tau^2`` and one lengthscale per input dimension."""

    output_variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.lengthscales, dtype=float)).copy()
        ls.setflags(write=False)
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "output_variance", float(self.output_variance))
        if not self.output_variance > 0 or not np.all(ls > 0):
            raise ValueError("output variance and lengthscales must be strictly positive")

    @property
    def dim(self) -> int:
        return self.lengthscales.shape[0]


def _check_dim(X, h):
    if X.shape[-1] != h.dim:
        raise ValueError(f"point dimension {X.shape[-1]} does not match {h.dim} lengthscales")


def scaled_sqdist(X1, X2, lengthscales):
    """Squared distance after dividing each coordinate by its lengthscale."""
    A = np.asarray(X1, dtype=float) / lengthscales
    C = np.asarray(X2, dtype=float) / lengthscales
    d = A[:, None, :] - C[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def rbf_gram(X1, X2, h: SpatialHyperparams):
    X1 = np.atleast_2d(np.asarray(X1, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    _check_dim(X1, h)
    _check_dim(X2, h)
    return h.output_variance * np.exp(-0.5 * scaled_sqdist(X1, X2, h.lengthscales))


def rbf_covariance(x, x2, h: SpatialHyperparams) -> float:
    """``tau^2 exp(-1/2 sum_j ((x_j - x'_j) / l_j)^2)`` for a single pair."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.shape != x2.shape:
        raise ValueError("points have different dimensions")
    _check_dim(x, h)
    z = (x - x2) / h.lengthscales
    return float(h.output_variance * np.exp(-0.5 * np.dot(z, z)))


@dataclass(frozen=True)
class TaskCovariance:
    """Cross-task covariance ``B = factor @ factor.T`` (D x D, rank <= P)."""

    factor: np.ndarray

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.factor, dtype=float)).copy()
        L.setflags(write=False)
        object.__setattr__(self, "factor", L)

    @property
    def matrix(self) -> np.ndarray:
        return self.factor @ self.factor.T

    @property
    def n_tasks(self) -> int:
        return self.factor.shape[0]

    @property
    def rank(self) -> int:
        return self.factor.shape[1]


def build_task_covariance(factor) -> TaskCovariance:
    factor = np.atleast_2d(np.asarray(factor, dtype=float))
    if factor.shape[1] < 1 or factor.shape[1] > factor.shape[0]:
        raise ValueError("factor must be D x P with 1 <= P <= D")
    return TaskCovariance(factor)


def icm_covariance(d, x, d2, x2, B: TaskCovariance, h: SpatialHyperparams) -> float:
    """``B[d, d'] * k(x, x')``."""
    D = B.n_tasks
    if not (0 <= d < D and 0 <= d2 < D):
        raise IndexError(f"task index out of range for {D} tasks")
    return float(B.matrix[d, d2]) * rbf_covariance(x, x2, h)


def icm_gram(tasks1, X1, tasks2, X2, B: TaskCovariance, h: SpatialHyperparams):
    tasks1 = np.asarray(tasks1, dtype=int)
    tasks2 = np.asarray(tasks2, dtype=int)
    D = B.n_tasks
    if tasks1.size and (tasks1.min() < 0 or tasks1.max() >= D):
        raise IndexError("task index out of range")
    if tasks2.size and (tasks2.min() < 0 or tasks2.max() >= D):
        raise IndexError("task index out of range")
    Bm = B.matrix
    return Bm[np.ix_(tasks1, tasks2)] * rbf_gram(X1, X2, h)


# --- task structures -------------------------------------------------------


class FixedTasks:
    """A task factor that is not fitted (e.g. ``[[1]]`` for a single task)."""

    def __init__(self, factor):
        self._factor = np.atleast_2d(np.asarray(factor, dtype=float))
        self.n_tasks = self._factor.shape[0]
        self.n_params = 0

    def factor(self, theta):
        return self._factor.copy()

    def pullback(self, theta, grad_factor):
        return np.zeros(0)

    def start_box(self):
        return np.zeros(0), np.zeros(0)

    def pack(self, factor):
        return np.zeros(0)


class FreeFactor:
    """
    Every entry of a D x P factor is free, except that a full-rank factor
    (P == D) is restricted to its lower triangle, i.e. a Cholesky factor.
    """

    def __init__(self, n_tasks: int, rank: int | None = None):
        rank = n_tasks if rank is None else rank
        if not 1 <= rank <= n_tasks:
            raise ValueError("rank must satisfy 1 <= rank <= n_tasks")
        self.n_tasks = n_tasks
        self.rank = rank
        mask = np.ones((n_tasks, rank), dtype=bool)
        if rank == n_tasks:
            mask = np.tril(mask)
        self._idx = np.nonzero(mask)
        self.n_params = int(mask.sum())

    def factor(self, theta):
        L = np.zeros((self.n_tasks, self.rank))
        L[self._idx] = theta
        return L

    def pullback(self, theta, grad_factor):
        return grad_factor[self._idx]

    def start_box(self):
        return -np.ones(self.n_params), np.ones(self.n_params)

    def pack(self, factor):
        return np.asarray(factor, dtype=float)[self._idx]


class BatchAdjusted:
    """
    Rank-2 factor for one online task plus ``n_batches`` simulator batches.

    Rows 0 (online) and 1 (first simulator batch) are free; the row of every
    later batch ``b`` is ``s_b`` times row 1, so later batches differ from the
    first one only by a scale (plus a constant offset carried by the mean).
    Parameters: ``[row0 (2), row1 (2), s_2 .. s_M]``.
    """

    def __init__(self, n_batches: int):
        if n_batches < 1:
            raise ValueError("need at least one simulator batch")
        self.n_batches = n_batches
        self.n_tasks = 1 + n_batches
        self.n_params = 4 + (n_batches - 1)

    def factor(self, theta):
        theta = np.asarray(theta, dtype=float)
        r0, r1, s = theta[:2], theta[2:4], theta[4:]
        return np.vstack([r0, r1, s[:, None] * r1[None, :]])

    def pullback(self, theta, grad_factor):
        theta = np.asarray(theta, dtype=float)
        r1, s = theta[2:4], theta[4:]
        g_r1 = grad_factor[1] + s @ grad_factor[2:]
        g_s = grad_factor[2:] @ r1
        return np.concatenate([grad_factor[0], g_r1, g_s])

    def start_box(self):
        lo = np.concatenate([-np.ones(4), 0.5 * np.ones(self.n_batches - 1)])
        hi = np.concatenate([np.ones(4), 1.5 * np.ones(self.n_batches - 1)])
        return lo, hi

    def pack(self, factor):
        factor = np.asarray(factor, dtype=float)
        r1 = factor[1]
        nrm = r1 @ r1
        s = factor[2:] @ r1 / nrm if nrm > 0 else np.ones(self.n_batches - 1)
        return np.concatenate([factor[0], r1, s])


@dataclass
class HyperparamLayout:
    """
    Packing of the hyperparameter vector.

    ``fixed_spatial`` removes tau^2 and the lengthscales from the vector;
    ``offset_tasks`` lists tasks that get a free constant mean.
    """

    dim: int
    structure: object
    offset_tasks: tuple = ()
    fixed_spatial: SpatialHyperparams | None = None
    _sizes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.offset_tasks = tuple(int(t) for t in self.offset_tasks)
        n_spatial = 0 if self.fixed_spatial is not None else 1 + self.dim
        self._sizes = (n_spatial, self.structure.n_params, len(self.offset_tasks))

    @property
    def n_tasks(self) -> int:
        return self.structure.n_tasks

    @property
    def size(self) -> int:
        return sum(self._sizes)

    def split(self, theta):
        a, b, _ = self._sizes
        theta = np.asarray(theta, dtype=float)
        return theta[:a], theta[a:a + b], theta[a + b:]

    def unpack(self, theta):
        """Return ``(SpatialHyperparams, TaskCovariance, offsets)``; offsets has one entry per task."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ValueError(f"expected {self.size} hyperparameters, got {theta.shape}")
        sp, tk, off = self.split(theta)
        if self.fixed_spatial is not None:
            h = self.fixed_spatial
        else:
            h = SpatialHyperparams(np.exp(sp[0]), np.exp(sp[1:]))
        offsets = np.zeros(self.n_tasks)
        offsets[list(self.offset_tasks)] = off
        return h, TaskCovariance(self.structure.factor(tk)), offsets

    def pack(self, h: SpatialHyperparams | None, factor, offsets=None):
        parts = []
        if self.fixed_spatial is None:
            parts.append([np.log(h.output_variance)])
            parts.append(np.log(h.lengthscales))
        parts.append(self.structure.pack(factor))
        if offsets is None:
            offsets = np.zeros(self.n_tasks)
        parts.append(np.asarray(offsets, dtype=float)[list(self.offset_tasks)])
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

    def bounds(self):
        """L-BFGS-B bounds; only log tau^2 and log lengthscales are boxed."""
        out = []
        if self.fixed_spatial is None:
            out.append(LOG_OUTPUTSCALE_BOUNDS)
            out.extend([LOG_LENGTHSCALE_BOUNDS] * self.dim)
        out.extend([(None, None)] * (self._sizes[1] + self._sizes[2]))
        return out

    def start_box(self):
        """Region that restart points are drawn from (a sub-box of the bounds)."""
        lo, hi = [], []
        if self.fixed_spatial is None:
            lo += [np.log(0.3)] + [np.log(0.1)] * self.dim
            hi += [np.log(3.0)] + [np.log(2.0)] * self.dim
        slo, shi = self.structure.start_box()
        lo += list(slo) + [-0.5] * self._sizes[2]
        hi += list(shi) + [0.5] * self._sizes[2]
        return np.array(lo, dtype=float), np.array(hi, dtype=float)
