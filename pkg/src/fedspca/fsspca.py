"""Smoothed sparse PCA over consensus ADMM (the multi-loading solver).

Each worker minimises, over the (generalized) Stiefel manifold,

    ||A_i - A_i w w^T||_F^2 + lambda1 * r(w) + <u_i, w> + rho/2 ||w - z||_F^2

with ``r`` the smoothed l1 penalty, by repeated steepest-descent line
searches. The master soft-thresholds the average of ``w_i + u_i / rho``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DataShard, HyperParams, LoadingMatrix
from .errors import DimensionError, ValidationError
from .operators import smooth_l1, smooth_l1_grad, soft_threshold
from .stiefel import LineSearchCondition, line_search


_STALL = 4.0 * np.finfo(np.float64).eps


def reconstruction_from_gram(C, w, trace_C=None) -> float:
    """||A - A w w^T||_F^2 written through the Gram matrix C = A^T A.

    Valid for any w, orthonormal or not.
    """
    Cw = C @ w
    wtCw = w.T @ Cw
    tc = np.trace(C) if trace_C is None else trace_C
    return float(tc - 2.0 * np.trace(wtCw) + np.sum((w.T @ w) * wtCw))


class FsspcaLocalProblem:
    """The worker sub-problem for fixed dual ``u`` and consensus ``z``.

    Pass either the shard or a precomputed Gram matrix. Objective and
    gradient share one cached product ``C @ w`` for the most recent ``w``.
    """

    def __init__(self, shard=None, u=None, z=None, lambda1=0.0, rho=0.0, mu=1e-3, gram=None):
        if gram is None:
            if shard is None:
                raise ValidationError("need a shard or a Gram matrix")
            A = shard.values if isinstance(shard, DataShard) else np.asarray(shard, dtype=np.float64)
            gram = A.T @ A
        self.gram = np.asarray(gram, dtype=np.float64)
        d = self.gram.shape[0]
        if self.gram.shape != (d, d):
            raise DimensionError(f"Gram matrix must be square, got {self.gram.shape}")
        self.u = None if u is None else np.asarray(u, dtype=np.float64)
        self.z = None if z is None else np.asarray(z, dtype=np.float64)
        self.lambda1 = float(lambda1)
        self.rho = float(rho)
        self.mu = float(mu)
        self._trace = float(np.trace(self.gram))
        self._key = None
        self._Cw = None
        self._grad = None

    @property
    def dim(self) -> int:
        return self.gram.shape[0]

    def _check(self, w):
        if w.ndim != 2 or w.shape[0] != self.dim:
            raise DimensionError(f"w has shape {w.shape}, expected ({self.dim}, r)")
        for name, arr in (("u", self.u), ("z", self.z)):
            if arr is not None and arr.shape != w.shape:
                raise DimensionError(f"{name} has shape {arr.shape}, w has {w.shape}")

    def _gram_product(self, w):
        key = w.tobytes()
        if key != self._key:
            self._key, self._Cw, self._grad = key, self.gram @ w, None
        return self._Cw

    def reconstruction(self, w) -> float:
        w = np.asarray(w, dtype=np.float64)
        Cw = self._gram_product(w)
        wtCw = w.T @ Cw
        return float(self._trace - 2.0 * wtCw.trace() + ((w.T @ w) * wtCw).sum())

    def objective(self, w) -> float:
        w = np.asarray(w, dtype=np.float64)
        self._check(w)
        value = self.reconstruction(w)
        if self.lambda1:
            value += self.lambda1 * smooth_l1(w, self.mu)
        if self.u is not None:
            value += float(np.vdot(self.u, w))
        if self.z is not None and self.rho:
            dz = (w - self.z).ravel()
            value += 0.5 * self.rho * float(dz @ dz)
        return value

    def gradient(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        self._check(w)
        Cw = self._gram_product(w)
        if self._grad is not None:
            return self._grad.copy()
        grad = -4.0 * Cw + 2.0 * Cw @ (w.T @ w) + 2.0 * w @ (w.T @ Cw)
        if self.lambda1:
            grad += self.lambda1 * smooth_l1_grad(w, self.mu)
        if self.u is not None:
            grad += self.u
        if self.z is not None and self.rho:
            grad += self.rho * (w - self.z)
        self._grad = grad
        return grad.copy()


def _values(w):
    return w.values if isinstance(w, LoadingMatrix) else np.asarray(w, dtype=np.float64)


def local_objective(p: FsspcaLocalProblem, w) -> float:
    return p.objective(_values(w))


def local_gradient(p: FsspcaLocalProblem, w) -> np.ndarray:
    return p.gradient(_values(w))


@dataclass(frozen=True)
class InnerResult:
    w: np.ndarray
    objective: float
    iterations: int
    last_step: float
    grad_norm: float


def worker_update(p: FsspcaLocalProblem, w_init, params: HyperParams, G=None,
                  initial_step: float | None = None) -> InnerResult:
    """Run line searches from ``w_init`` until the Riemannian gradient norm
    drops below ``params.tol_inner`` or ``params.max_inner_iters`` is hit.

    Each search starts from the previous accepted step. The loop also stops
    once a search can no longer lower the objective beyond roundoff.
    """
    w = _values(w_init)
    f_w = p.objective(w)
    step = params.initial_step if initial_step is None else initial_step
    grad_norm = np.inf
    it = 0
    for it in range(1, params.max_inner_iters + 1):
        res = line_search(p.objective, p.gradient, w, params, G=G, initial_step=step, f0=f_w)
        grad_norm = res.grad_norm
        if res.theta == 0.0:
            if res.condition is LineSearchCondition.MAX_STEPS:
                step = params.initial_step
            break
        stalled = res.f_next >= f_w - _STALL * max(abs(f_w), 1.0)
        w, f_w = res.w_next, res.f_next
        step = res.theta
        if stalled:
            break
    return InnerResult(w, f_w, it, step, grad_norm)


def master_update(ws: Sequence, us: Sequence, l1_weight: float, rho: float) -> np.ndarray:
    """Closed-form consensus update: soft_threshold(mean(w_i + u_i / rho), l1 / (K rho))."""
    if len(ws) == 0:
        raise ValidationError("master update needs at least one worker")
    if len(ws) != len(us):
        raise DimensionError("need one dual per primal")
    payloads = [_values(w) + np.asarray(u, dtype=np.float64) / rho for w, u in zip(ws, us)]
    return consensus_from_payloads(payloads, l1_weight, rho)


def consensus_from_payloads(payloads: Sequence[np.ndarray], l1_weight: float, rho: float) -> np.ndarray:
    """Master update from the uploaded sums v_i = w_i + u_i / rho."""
    if len(payloads) == 0:
        raise ValidationError("master update needs at least one worker")
    shapes = {np.shape(v) for v in payloads}
    if len(shapes) != 1:
        raise DimensionError(f"worker payloads disagree on shape: {sorted(shapes)}")
    K = len(payloads)
    mean = np.mean(np.stack(payloads), axis=0)
    return soft_threshold(mean, l1_weight / (K * rho))


def dual_update(u, w, z, rho) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    w, z = _values(w), _values(z)
    if not u.shape == w.shape == z.shape:
        raise DimensionError(f"dual update shape mismatch: {u.shape}, {w.shape}, {z.shape}")
    return u + rho * (w - z)


class FsspcaWorker:
    """Worker-side state across ADMM rounds: local primal, dual and Gram matrix."""

    algorithm = "fsspca"

    def __init__(self, A, params: HyperParams, w0, G=None):
        A = np.asarray(A, dtype=np.float64)
        self.params = params
        self.gram = A.T @ A
        self._trace = float(np.trace(self.gram))
        self.G = G
        self.w = np.array(_values(w0), dtype=np.float64)
        self.u = np.zeros_like(self.w)
        self.step_size = params.initial_step
        self.inner_iters = 0

    def step(self, z, first: bool):
        """Dual update with the consensus just received (skipped on the first
        round), then the local primal update. Returns the upload ``w + u / rho``."""
        p = self.params
        z = np.asarray(z, dtype=np.float64)
        # local share of the global objective at the consensus just received
        objective = reconstruction_from_gram(self.gram, z, self._trace)
        if not first:
            self.u = dual_update(self.u, self.w, z, p.rho)
        prob = FsspcaLocalProblem(gram=self.gram, u=self.u, z=z, lambda1=p.lambda1, rho=p.rho, mu=p.mu)
        res = worker_update(prob, self.w, p, G=self.G, initial_step=self.step_size)
        self.w, self.step_size = res.w, res.last_step
        self.inner_iters = res.iterations
        stats = {"objective": objective, "inner_iters": res.iterations}
        return self.w + self.u / p.rho, stats


def solve_fsspca(shards, params: HyperParams, *, threads: int = 1, trace=None):
    """Run consensus ADMM to convergence and return a ``SolveResult`` whose
    ``loadings`` are qf of the final consensus."""
    from .admm import LocalCohort, run_schedule

    cohort = LocalCohort(shards, threads=threads)
    return run_schedule(cohort, "fsspca", [params], trace=trace)


def deflate_fsspca(shards, schedule: Sequence[HyperParams], *, threads: int = 1, trace=None):
    """Extract ``sum(p.r for p in schedule)`` loadings in successive deflation
    steps; steps after the first run on the generalized Stiefel manifold."""
    from .admm import LocalCohort, run_schedule

    cohort = LocalCohort(shards, threads=threads)
    return run_schedule(cohort, "fsspca", list(schedule), trace=trace)
