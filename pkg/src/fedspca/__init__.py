"""Federated sparse PCA via consensus ADMM."""

from .admm import SolveResult, run_schedule
from .core import (
    DataShard,
    DeflationContext,
    HyperParams,
    LoadingMatrix,
    WorkerState,
    center_federated,
    random_orthonormal,
)
from .faspca import deflate_faspca, solve_faspca
from .fsspca import deflate_fsspca, solve_fsspca

__all__ = [
    "DataShard",
    "DeflationContext",
    "HyperParams",
    "LoadingMatrix",
    "SolveResult",
    "WorkerState",
    "center_federated",
    "deflate_faspca",
    "deflate_fsspca",
    "random_orthonormal",
    "run_schedule",
    "solve_faspca",
    "solve_fsspca",
]

__version__ = "0.1.0"
