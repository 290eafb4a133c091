"""Synthetic spiked-covariance data and WDBC feature augmentation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .core import DataShard
from .errors import ValidationError
from .stiefel import qf

WDBC_ROWS = 569
WDBC_COLS = 30
ADDED_FEATURES = 800


@dataclass(frozen=True)
class SyntheticSpec:
    d: int = 500
    n: int = 1000
    K: int = 1
    iid: bool = True
    seed: int = 0
    top_eigenvalues: tuple = (400.0, 300.0)
    block: int = 10
    unit_eigvecs: bool = True

    def __post_init__(self):
        if self.d < 2 * self.block:
            raise ValidationError(f"d={self.d} too small for two planted blocks of {self.block}")
        if self.K < 1 or self.n < self.K:
            raise ValidationError(f"need 1 <= K <= n, got K={self.K}, n={self.n}")
        if not self.iid and self.K < 2:
            raise ValidationError("non-IID data needs K >= 2")
        if any(not v > 0 for v in self.top_eigenvalues):
            raise ValidationError("eigenvalues must be positive")

    @property
    def v_sol(self) -> np.ndarray:
        return planted_loadings(self.d, self.block)

    @property
    def eigenvalues(self) -> np.ndarray:
        ev = np.ones(self.d)
        ev[: len(self.top_eigenvalues)] = self.top_eigenvalues
        return ev

    def to_dict(self) -> dict:
        out = asdict(self)
        out["top_eigenvalues"] = list(self.top_eigenvalues)
        return out


def planted_loadings(d: int, block: int = 10) -> np.ndarray:
    """Two orthonormal columns: 1/sqrt(block) on rows [0, block) and [block, 2 block)."""
    v = np.zeros((d, 2))
    v[:block, 0] = 1.0 / np.sqrt(block)
    v[block:2 * block, 1] = 1.0 / np.sqrt(block)
    return v


def _sample(rng, n, V, eigenvalues):
    # rows ~ N(0, V D V^T)
    return (rng.standard_normal((n, V.shape[0])) * np.sqrt(eigenvalues)) @ V.T


def _split(X, K, start_id=0):
    return [DataShard(block, worker_id=start_id + i) for i, block in enumerate(np.array_split(X, K))]


def gen_synthetic_iid(spec: SyntheticSpec) -> list[DataShard]:
    """Draw n rows from N(0, V D V^T) and split them evenly across K shards.

    The non-planted eigenvectors start as U[0, 1) draws and are then
    orthonormalised against the planted pair so that V is orthogonal.
    """
    rng = np.random.default_rng(spec.seed)
    v_sol = spec.v_sol
    V = qf(np.hstack([v_sol, rng.random((spec.d, spec.d - 2))]))
    V[:, :2] = v_sol
    X = _sample(rng, spec.n, V, spec.eigenvalues)
    return _split(X, spec.K)


def gen_synthetic_noniid(spec: SyntheticSpec, return_sigmas: bool = False):
    """Per-worker covariances sharing the planted pair and the eigenvalues.

    Worker i draws its remaining eigenvector entries from N(0, sigma_i^2)
    with sigma_i ~ U[0, 1). The columns are not orthogonalised. With
    ``spec.unit_eigvecs`` they are scaled to unit length; otherwise they are
    used as drawn, which in high dimension gives the tail a spectrum that
    swamps the planted pair.
    """
    if spec.K < 2:
        raise ValidationError("non-IID data needs K >= 2")
    rng = np.random.default_rng(spec.seed)
    v_sol = spec.v_sol
    sizes = [len(b) for b in np.array_split(np.arange(spec.n), spec.K)]
    sigmas = rng.random(spec.K)
    shards = []
    for i, (n_i, sigma) in enumerate(zip(sizes, sigmas)):
        tail = rng.normal(0.0, sigma, (spec.d, spec.d - 2))
        if spec.unit_eigvecs:
            norms = np.linalg.norm(tail, axis=0)
            tail = tail / np.where(norms > 0, norms, 1.0)
        V = np.hstack([v_sol, tail])
        shards.append(DataShard(_sample(rng, n_i, V, spec.eigenvalues), worker_id=i))
    return (shards, sigmas) if return_sigmas else shards


def load_wdbc_base() -> np.ndarray:
    """The 569 x 30 WDBC feature matrix bundled with scikit-learn."""
    try:
        from sklearn.datasets import load_breast_cancer
    except ImportError as exc:  # pragma: no cover
        raise ValidationError("scikit-learn is needed for the bundled WDBC copy; "
                              "pass a CSV instead") from exc
    return np.asarray(load_breast_cancer().data, dtype=np.float64)


def augment_wdbc(base, mode: str = "iid", K: int = 1, seed: int = 0,
                 added: int = ADDED_FEATURES) -> list[DataShard]:
    """Append ``added`` random features to the 30 WDBC features and shard by rows.

    iid: every added feature is U[0, 1).
    noniid: the added features are split into K blocks. Worker i's own block
    is N(0, sigma_i^2) with sigma_i ~ U[0, 1); every other block is 80% exact
    zeros and 20% U[0, 1).
    """
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 2 or base.shape[1] != WDBC_COLS:
        raise ValidationError(f"WDBC base must have {WDBC_COLS} columns, got shape {base.shape}")
    if K < 1 or K > base.shape[0]:
        raise ValidationError(f"bad K={K}")
    rng = np.random.default_rng(seed)
    n = base.shape[0]
    if mode == "iid":
        X = np.hstack([base, rng.random((n, added))])
        return _split(X, K)
    if mode != "noniid":
        raise ValidationError(f"mode must be 'iid' or 'noniid', got {mode!r}")
    row_blocks = np.array_split(np.arange(n), K)
    col_blocks = np.array_split(np.arange(added), K)
    sigmas = rng.random(K)
    shards = []
    for i, rows in enumerate(row_blocks):
        n_i = len(rows)
        extra = rng.random((n_i, added)) * (rng.random((n_i, added)) < 0.2)
        own = col_blocks[i]
        extra[:, own] = rng.normal(0.0, sigmas[i], (n_i, len(own)))
        shards.append(DataShard(np.hstack([base[rows], extra]), worker_id=i))
    return shards
