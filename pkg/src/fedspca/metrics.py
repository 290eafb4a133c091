"""Evaluation metrics for computed loadings."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from .core import DataShard, LoadingMatrix
from .errors import DimensionError, NumericalError

DEFAULT_L0_TOL = 1e-6
DECADES = tuple(range(1, 11))


def _mat(x) -> np.ndarray:
    if isinstance(x, LoadingMatrix):
        return x.values
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def recovery_error(z, v_sol) -> float:
    """||z z^T - V V^T||_F^2; zero whenever z spans the same subspace as V."""
    z, v = _mat(z), _mat(v_sol)
    if z.shape[0] != v.shape[0]:
        raise DimensionError(f"dimension mismatch: {z.shape} vs {v.shape}")
    return float(np.linalg.norm(z @ z.T - v @ v.T) ** 2)


def reconstruction_error(shards: Sequence, z) -> float:
    """Sum over shards of ||A_i - A_i z z^T||_F^2."""
    z = _mat(z)
    total = 0.0
    for s in shards:
        A = s.values if isinstance(s, DataShard) else np.asarray(s, dtype=np.float64)
        if A.shape[1] != z.shape[0]:
            raise DimensionError(f"shard has {A.shape[1]} columns, loadings have {z.shape[0]} rows")
        total += float(np.sum((A - (A @ z) @ z.T) ** 2))
    return total


def reconstruction_norm(shards: Sequence, z) -> float:
    """Unsquared Frobenius residual: the scale the published benchmark table reports."""
    return float(np.sqrt(reconstruction_error(shards, z)))


def l0_count(z, tol: float = DEFAULT_L0_TOL) -> int:
    return int(np.count_nonzero(np.abs(_mat(z)) > tol))


def _fractions(block: np.ndarray, decades) -> dict:
    if block.size == 0:
        return {i: float("nan") for i in decades}
    a = np.abs(block)
    return {i: float(np.mean(a <= 10.0 ** (-i))) for i in decades}


def small_value_profile(z, original_count: int, decades=DECADES) -> dict:
    """Fraction of entries within [-10^-i, 10^-i] per decade ``i``,
    separately for the first ``original_count`` feature rows and the rest."""
    z = _mat(z)
    return {
        "original": _fractions(z[:original_count], decades),
        "added": _fractions(z[original_count:], decades),
    }


def mean_abs_cosine(ws: Sequence) -> float:
    """Average |cos| over unordered worker pairs, column by column."""
    mats = [_mat(w) for w in ws]
    if len(mats) < 2:
        raise DimensionError("need at least two workers")
    norms = [np.linalg.norm(m, axis=0) for m in mats]
    if any(np.any(n == 0) for n in norms):
        raise NumericalError("zero-norm column in cosine similarity")
    values = []
    for (a, na), (b, nb) in combinations(zip(mats, norms), 2):
        values.append(np.abs(np.sum(a * b, axis=0)) / (na * nb))
    return float(np.clip(np.mean(values), 0.0, 1.0))


@dataclass
class MetricsReport:
    recovery_error: float | None = None
    reconstruction_error: float | None = None
    reconstruction_norm: float | None = None
    l0_count: int | None = None
    mean_abs_cosine: float | None = None
    small_value_percentages: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["small_value_percentages"] = {
            group: {str(k): v for k, v in fr.items()}
            for group, fr in self.small_value_percentages.items()
        }
        return out
