"""Shared domain types, validation and seeded initialisation.

All matrices are dense float64 numpy arrays. Value objects are frozen and
their arrays are marked read-only, so they can be handed to concurrent
workers without copying.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, ValidationError
from .stiefel import qf

ORTHO_FLAG_TOL = 1e-8
FRESH_ORTHO_TOL = 1e-10


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class DataShard:
    """One worker's locally held data block (rows are instances)."""

    values: np.ndarray
    worker_id: int = 0

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2:
            raise DimensionError(f"shard must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError(f"shard {self.worker_id} contains NaN or Inf")
        object.__setattr__(self, "values", values)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LoadingMatrix:
    """A d x r matrix of loadings, optionally asserted orthonormal."""

    values: np.ndarray
    orthonormal_flag: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        values = _frozen(values)
        if values.ndim != 2:
            raise DimensionError(f"loadings must be 2-D, got shape {values.shape}")
        d, r = values.shape
        if not 1 <= r <= d:
            raise DimensionError(f"rank {r} outside [1, {d}]")
        if self.orthonormal_flag:
            err = np.linalg.norm(values.T @ values - np.eye(r))
            if err > ORTHO_FLAG_TOL:
                raise ValidationError(f"orthonormal flag set but ||w^T w - I||_F = {err:.3e}")
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def rank(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WorkerState:
    """Local primal ``w``, dual ``u`` and the shard they belong to."""

    w: LoadingMatrix
    u: np.ndarray
    shard: DataShard

    def __post_init__(self):
        u = _frozen(self.u)
        if self.w.dim != self.shard.cols:
            raise DimensionError(f"w has {self.w.dim} rows but shard has {self.shard.cols} columns")
        if u.shape != self.w.values.shape:
            raise DimensionError(f"dual shape {u.shape} != primal shape {self.w.values.shape}")
        object.__setattr__(self, "u", u)


@dataclass(frozen=True)
class HyperParams:
    """Solver hyper-parameters.

    ``lam`` is the l1 weight of the projection-approximation solver;
    ``lambda1``/``lambda2`` are the smoothing and consensus l1 weights of
    the smoothing solver. ``tol_primal``/``tol_dual`` default to
    ``1e-4 * sqrt(d * r)`` when left as None.
    """

    lam: float = 0.0
    lambda1: float = 0.0
    lambda2: float = 0.0
    rho: float = 1000.0
    mu: float = 1e-3
    r: int = 1
    c1: float = 1e-4
    c2: float = 0.9
    max_rounds: int = 500
    max_linesearch_steps: int = 30
    tol_primal: float | None = None
    tol_dual: float | None = None
    tol_inner: float = 1e-6
    max_inner_iters: int = 50
    initial_step: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("lam", "lambda1", "lambda2"):
            if not getattr(self, name) >= 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.rho > 0:
            raise ValidationError(f"rho must be > 0, got {self.rho}")
        if not self.mu > 0:
            raise ValidationError(f"mu must be > 0, got {self.mu}")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValidationError(f"need 0 < c1 < c2 < 1, got c1={self.c1}, c2={self.c2}")
        if self.r < 1:
            raise ValidationError(f"r must be >= 1, got {self.r}")
        if self.max_rounds < 1 or self.max_linesearch_steps < 1 or self.max_inner_iters < 1:
            raise ValidationError("iteration limits must be >= 1")
        for name in ("tol_primal", "tol_dual"):
            value = getattr(self, name)
            if value is not None and not value >= 0:
                raise ValidationError(f"{name} must be >= 0, got {value}")
        if not self.tol_inner >= 0:
            raise ValidationError(f"tol_inner must be >= 0, got {self.tol_inner}")
        if not self.initial_step > 0:
            raise ValidationError(f"initial_step must be > 0, got {self.initial_step}")

    def tolerances(self, d: int, r: int | None = None) -> tuple[float, float]:
        default = 1e-4 * math.sqrt(d * (r or self.r))
        tp = default if self.tol_primal is None else self.tol_primal
        td = default if self.tol_dual is None else self.tol_dual
        return tp, td

    def replace(self, **changes) -> "HyperParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown hyper-parameters: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class DeflationContext:
    """Accumulated complement projector ``G`` and the accepted loadings."""

    G: np.ndarray
    accepted: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "G", _frozen(self.G))
        object.__setattr__(self, "accepted", tuple(_frozen(z) for z in self.accepted))

    @classmethod
    def identity(cls, d: int) -> "DeflationContext":
        return cls(np.eye(d))

    @property
    def dim(self) -> int:
        return self.G.shape[0]

    def accept(self, z: np.ndarray) -> "DeflationContext":
        """Append orthonormal columns ``z`` and shrink ``G`` to their complement."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = z[:, None]
        G = self.G @ (np.eye(self.dim) - z @ z.T)
        return DeflationContext(G, self.accepted + (z,))

    def loadings(self) -> np.ndarray:
        if not self.accepted:
            return np.zeros((self.dim, 0))
        return np.hstack(self.accepted)

    def check(self, sym_tol=1e-10, idem_tol=1e-8, null_tol=1e-8) -> None:
        G = self.G
        if np.linalg.norm(G - G.T) > sym_tol:
            raise ValidationError("deflation projector is not symmetric")
        if np.linalg.norm(G @ G - G) > idem_tol:
            raise ValidationError("deflation projector is not idempotent")
        for z in self.accepted:
            if np.linalg.norm(G @ z, axis=0).max() > null_tol:
                raise ValidationError("accepted loading not annihilated by projector")


def random_orthonormal(d: int, r: int, seed: int) -> LoadingMatrix:
    """Seeded d x r orthonormal matrix: qf of a standard Gaussian draw."""
    if not 1 <= r <= d:
        raise DimensionError(f"need 1 <= r <= d, got d={d}, r={r}")
    gauss = np.random.default_rng(seed).standard_normal((d, r))
    return LoadingMatrix(qf(gauss), orthonormal_flag=True)


def validate_shards(shards: Sequence[DataShard]) -> int:
    """Return the common feature dimension or raise."""
    if len(shards) == 0:
        raise ValidationError("empty shard list")
    dims = {s.cols for s in shards}
    if len(dims) != 1:
        raise DimensionError(f"shards disagree on feature dimension: {sorted(dims)}")
    return dims.pop()


def as_shards(data: Iterable) -> list[DataShard]:
    out = []
    for i, item in enumerate(data):
        out.append(item if isinstance(item, DataShard) else DataShard(item, worker_id=i))
    return out


def column_stats(values: np.ndarray) -> np.ndarray:
    """Column sums followed by the row count: the d + 1 numbers a worker shares."""
    values = np.asarray(values, dtype=np.float64)
    return np.append(values.sum(axis=0), float(values.shape[0]))


def global_mean(stats: Sequence[np.ndarray]) -> np.ndarray:
    total = np.sum(stats, axis=0)
    count = total[-1]
    if count <= 0:
        raise ValidationError("no rows to centre")
    return total[:-1] / count


def center_federated(shards: Sequence[DataShard]) -> tuple[list[DataShard], np.ndarray]:
    """Centre every shard by the global column mean, sharing only column sums."""
    validate_shards(shards)
    mean = global_mean([column_stats(s.values) for s in shards])
    centred = [DataShard(s.values - mean, worker_id=s.worker_id) for s in shards]
    return centred, mean


def stack(shards: Sequence[DataShard]) -> np.ndarray:
    return np.vstack([s.values for s in shards])


def read_matrix_csv(path, header: bool = False, drop_cols: Sequence[int] = ()) -> np.ndarray:
    path = Path(path)
    with path.open() as fh:
        first = fh.readline()
        if header:
            first = fh.readline()
    ncols = len(first.split(","))
    drop = {c % ncols for c in drop_cols}
    usecols = [c for c in range(ncols) if c not in drop]
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1 if header else 0,
                          usecols=usecols, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from exc
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{path}: non-finite values")
    return data


def write_matrix_csv(path, matrix) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    np.savetxt(path, matrix, delimiter=",", fmt="%.17g")
