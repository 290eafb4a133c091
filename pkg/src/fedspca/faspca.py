"""Projection-approximation sparse PCA: one loading per ADMM run.

With y = A w_prev held fixed, the worker objective
||A - y w^T||^2 + u^T w + rho/2 ||w - z||^2 is a quadratic in w whose
minimiser is available in closed form; the result is then rescaled onto the
unit sphere (or onto w^T G w = 1 during deflation).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import HyperParams
from .errors import DegenerateUpdateError, DimensionError, ValidationError
from .fsspca import dual_update, reconstruction_from_gram


@dataclass(frozen=True)
class FaspcaWorkerInput:
    A: np.ndarray
    w_prev: np.ndarray
    u: np.ndarray
    z: np.ndarray
    rho: float
    G: np.ndarray | None = None

    def __post_init__(self):
        d = np.shape(self.A)[1]
        for name in ("w_prev", "u", "z"):
            if np.shape(getattr(self, name)) not in ((d,), (d, 1)):
                raise DimensionError(f"{name} must be a length-{d} vector")
        if not self.rho > 0:
            raise ValidationError("rho must be > 0")


def _col(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(-1, 1)


def closed_form_update(A, w_prev, u, z, rho) -> np.ndarray:
    """Unnormalised minimiser (2 A^T y - u + rho z) / (2 y^T y + rho), y = A w_prev."""
    A = np.asarray(A, dtype=np.float64)
    y = A @ _col(w_prev)
    denom = 2.0 * float(np.vdot(y, y)) + rho
    return (2.0 * A.T @ y - _col(u) + rho * _col(z)) / denom


def faspca_worker_update(inp: FaspcaWorkerInput) -> np.ndarray:
    w = closed_form_update(inp.A, inp.w_prev, inp.u, inp.z, inp.rho)
    norm = np.linalg.norm(w if inp.G is None else inp.G @ w)
    if not norm > 0 or not np.isfinite(norm):
        raise DegenerateUpdateError("worker update produced a zero vector")
    return w / norm


class FaspcaWorker:
    algorithm = "faspca"

    def __init__(self, A, params: HyperParams, w0, G=None):
        self.A = np.asarray(A, dtype=np.float64)
        self.params = params
        self.gram = self.A.T @ self.A
        self.G = G
        self.w = _col(w0).copy()
        self.u = np.zeros_like(self.w)
        self.inner_iters = 1

    def step(self, z, first: bool):
        p = self.params
        z = _col(z)
        # local share of the global objective at the consensus just received
        stats = {"objective": reconstruction_from_gram(self.gram, z), "inner_iters": 1}
        if not first:
            self.u = dual_update(self.u, self.w, z, p.rho)
        self.w = faspca_worker_update(FaspcaWorkerInput(self.A, self.w, self.u, z, p.rho, self.G))
        return self.w + self.u / p.rho, stats


def solve_faspca(shards, params: HyperParams, *, threads: int = 1, trace=None):
    """Single-loading solve. ``params.r`` is ignored (always 1); the returned
    loading is the final consensus scaled to unit length."""
    from .admm import LocalCohort, run_schedule

    cohort = LocalCohort(shards, threads=threads)
    return run_schedule(cohort, "faspca", [params.replace(r=1)], trace=trace)


def deflate_faspca(shards, params: HyperParams | Sequence[HyperParams], r: int | None = None,
                   *, threads: int = 1, trace=None):
    """Extract ``r`` loadings one at a time. ``params`` is either one
    parameter set reused for every loading or a list with one entry each."""
    from .admm import LocalCohort, run_schedule

    if isinstance(params, HyperParams):
        if r is None:
            raise ValidationError("r is required with a single parameter set")
        schedule = [params] * r
    else:
        schedule = list(params)
        if r is not None and r != len(schedule):
            raise ValidationError(f"r={r} but {len(schedule)} parameter sets given")
    schedule = [p.replace(r=1) for p in schedule]
    cohort = LocalCohort(shards, threads=threads)
    return run_schedule(cohort, "faspca", schedule, trace=trace)
