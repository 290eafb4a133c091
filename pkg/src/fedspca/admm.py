"""Consensus ADMM driver shared by in-process solves and federated sessions.

The master only ever sees what a cohort returns from a round: each worker's
upload ``v_i = w_i + u_i / rho`` plus scalar statistics. Worker primals for
diagnostics are recovered from consecutive uploads: since
``u_i^t / rho = v_i^{t-1} - z^t``, ``w_i^{t+1} = v_i^t - v_i^{t-1} + z^t``.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import DataShard, DeflationContext, HyperParams, LoadingMatrix, as_shards, column_stats, random_orthonormal, validate_shards
from .errors import DegenerateUpdateError, DimensionError, ValidationError
from .faspca import FaspcaWorker
from .fsspca import FsspcaWorker, consensus_from_payloads
from .metrics import mean_abs_cosine
from .stiefel import qf

log = logging.getLogger(__name__)

ALGORITHMS = ("fsspca", "faspca")
TRACE_COLUMNS = ("round", "objective", "primal_residual", "dual_residual", "mean_abs_cosine", "bytes_sent")


@dataclass(frozen=True)
class PhaseSpec:
    """One ADMM run: the first solve or one deflation step."""

    algorithm: str
    params: HyperParams
    index: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"unknown algorithm {self.algorithm!r}")

    @property
    def seed(self) -> int:
        return self.params.seed + self.index

    @property
    def l1_weight(self) -> float:
        return self.params.lambda2 if self.algorithm == "fsspca" else self.params.lam


@dataclass
class RoundRecord:
    round: int
    objective: float
    primal_residual: float
    dual_residual: float
    mean_abs_cosine: float
    bytes_sent: int = 0
    phase: int = 0


@dataclass
class PhaseResult:
    z: np.ndarray
    rounds: int
    converged: bool
    records: list
    worker_primals: list


@dataclass
class SolveResult:
    loadings: LoadingMatrix
    converged: bool
    rounds: int
    trace: list = field(default_factory=list)
    phases: list = field(default_factory=list)
    context: DeflationContext | None = None

    @property
    def z(self) -> np.ndarray:
        return self.loadings.values

    @property
    def final_cosine(self) -> float:
        return self.trace[-1].mean_abs_cosine if self.trace else float("nan")


class WorkerNode:
    """Everything a single worker holds: its (possibly deflated) shard, the
    deflation projector it has accumulated, and the current solver state."""

    def __init__(self, shard, worker_id: int | None = None):
        if isinstance(shard, DataShard):
            worker_id = shard.worker_id if worker_id is None else worker_id
            shard = shard.values
        self.A = np.array(shard, dtype=np.float64)
        self.worker_id = 0 if worker_id is None else worker_id
        self.G = None
        self.solver = None
        self._first = True

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def rows(self) -> int:
        return self.A.shape[0]

    def column_stats(self) -> np.ndarray:
        return column_stats(self.A)

    def center(self, mean) -> None:
        self.A = self.A - np.asarray(mean, dtype=np.float64)

    def start_phase(self, spec: PhaseSpec) -> None:
        w0 = random_orthonormal(self.dim, spec.params.r, spec.seed).values
        if self.G is not None:
            w0 = qf(self.G @ w0)
        cls = FsspcaWorker if spec.algorithm == "fsspca" else FaspcaWorker
        self.solver = cls(self.A, spec.params, w0, G=self.G)
        self._first = True

    def step(self, z):
        v, stats = self.solver.step(z, self._first)
        self._first = False
        return v, stats

    def deflate(self, z) -> None:
        z = np.asarray(z, dtype=np.float64).reshape(self.dim, -1)
        P = np.eye(self.dim) - z @ z.T
        self.A = self.A @ P
        self.G = P if self.G is None else self.G @ P


class LocalCohort:
    """Workers held in this process; rounds optionally run on a thread pool."""

    def __init__(self, shards, threads: int = 1):
        shards = as_shards(shards)
        validate_shards(shards)
        self.nodes = [WorkerNode(s) for s in shards]
        self.threads = max(1, int(threads))
        self.bytes_sent = 0
        self.bytes_received = 0
        self.messages = 0

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def dim(self) -> int:
        return self.nodes[0].dim

    def _map(self, fn):
        if self.threads > 1 and len(self.nodes) > 1:
            with ThreadPoolExecutor(max_workers=min(self.threads, len(self.nodes))) as pool:
                return list(pool.map(fn, self.nodes))
        return [fn(n) for n in self.nodes]

    def start_phase(self, spec: PhaseSpec) -> None:
        for n in self.nodes:
            n.start_phase(spec)

    def round(self, z, t: int):
        return self._map(lambda n: n.step(z))

    def deflate(self, z) -> None:
        for n in self.nodes:
            n.deflate(z)

    def finish(self, z) -> None:
        pass


class TraceWriter:
    """Append-only per-round CSV."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="") as fh:
            csv.writer(fh).writerow(TRACE_COLUMNS)

    def __call__(self, rec: RoundRecord) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([
                rec.round, repr(rec.objective), repr(rec.primal_residual),
                repr(rec.dual_residual), repr(rec.mean_abs_cosine), rec.bytes_sent,
            ])


def read_trace(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _sink(trace) -> Callable | None:
    if trace is None or callable(trace):
        return trace
    return TraceWriter(trace)


def run_consensus(cohort, spec: PhaseSpec, on_round: Callable | None = None,
                  round_offset: int = 0) -> PhaseResult:
    """Synchronous rounds: broadcast z, gather uploads, update z, check residuals."""
    p = spec.params
    d, r, K = cohort.dim, p.r, cohort.size
    tol_p, tol_d = p.tolerances(d, r)
    z = np.zeros((d, r))
    prev = None
    records = []
    ws = []
    converged = False
    t = 0
    for t in range(p.max_rounds):
        sent_before = cohort.bytes_sent
        replies = cohort.round(z, t)
        vs = [np.asarray(v, dtype=np.float64).reshape(d, r) for v, _ in replies]
        z_new = consensus_from_payloads(vs, spec.l1_weight, p.rho)
        ws = vs if prev is None else [v - pv + z for v, pv in zip(vs, prev)]
        primal = max(float(np.linalg.norm(w - z_new)) for w in ws)
        dual = p.rho * float(np.linalg.norm(z_new - z))
        # global objective at the consensus broadcast this round
        objective = sum(s["objective"] for _, s in replies) + spec.l1_weight * float(np.abs(z).sum())
        try:
            cosine = mean_abs_cosine(ws) if K > 1 else float("nan")
        except (DimensionError, ArithmeticError):
            cosine = float("nan")
        rec = RoundRecord(round_offset + t, objective, primal, dual, cosine,
                          cohort.bytes_sent - sent_before, spec.index)
        records.append(rec)
        if on_round is not None:
            on_round(rec)
        prev, z = vs, z_new
        if primal <= tol_p and dual <= tol_d:
            converged = True
            break
    rounds = t + 1
    if not converged:
        log.info("phase %d (%s) stopped at max_rounds=%d without converging",
                 spec.index, spec.algorithm, p.max_rounds)
    return PhaseResult(z, rounds, converged, records, ws)


def _finalize(algorithm: str, z: np.ndarray) -> np.ndarray:
    if algorithm == "fsspca":
        return qf(z)
    norm = np.linalg.norm(z)
    if not norm > 0:
        raise DegenerateUpdateError("consensus loading is identically zero")
    return z / norm


def run_schedule(cohort, algorithm: str, schedule: Sequence[HyperParams], trace=None) -> SolveResult:
    """Solve once per schedule entry, deflating between entries.

    After each solve the consensus is mapped into the complement of the
    loadings found so far, orthonormalised (qf, or l2 scaling for single
    loadings), and only then used to deflate the shards and the projector.
    """
    if not schedule:
        raise ValidationError("empty schedule")
    d = cohort.dim
    total = sum(p.r for p in schedule)
    if total > d:
        raise DimensionError(f"schedule asks for {total} loadings in dimension {d}")
    sink = _sink(trace)
    ctx = DeflationContext.identity(d)
    phases, records = [], []
    offset = 0
    for j, params in enumerate(schedule):
        spec = PhaseSpec(algorithm, params, j)
        cohort.start_phase(spec)
        ph = run_consensus(cohort, spec, on_round=sink, round_offset=offset)
        offset += ph.rounds
        phases.append(ph)
        records.extend(ph.records)
        z = ph.z if j == 0 else ctx.G @ ph.z
        zj = _finalize(algorithm, z)
        ctx = ctx.accept(zj)
        if j < len(schedule) - 1:
            cohort.deflate(zj)
    cohort.finish(ctx.loadings())
    loadings = LoadingMatrix(ctx.loadings(), orthonormal_flag=True)
    return SolveResult(
        loadings=loadings,
        converged=all(ph.converged for ph in phases),
        rounds=offset,
        trace=records,
        phases=phases,
        context=ctx,
    )


def records_to_dicts(records: Sequence[RoundRecord]) -> list[dict]:
    return [asdict(r) for r in records]


def nan_to_none(x):
    return None if isinstance(x, float) and math.isnan(x) else x


def build_schedule(algorithm: str, params: HyperParams, deflate: int | None = None) -> list[HyperParams]:
    """Phase list for a run.

    With ``deflate`` set, that many single loadings are extracted one after
    another. Otherwise the smoothing solver finds all ``params.r`` loadings
    at once and the projection-approximation solver deflates ``params.r``
    times (it only handles one loading per solve).
    """
    if algorithm not in ALGORITHMS:
        raise ValidationError(f"unknown algorithm {algorithm!r}")
    if deflate is not None:
        if deflate < 1:
            raise ValidationError(f"deflate must be >= 1, got {deflate}")
        return [params.replace(r=1)] * deflate
    if algorithm == "fsspca":
        return [params]
    return [params.replace(r=1)] * params.r
