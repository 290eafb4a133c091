"""Master/worker sessions over a frame transport.

Lifecycle: every worker says Hello and sends its column statistics, the
master answers with the global mean (centering pre-pass), then each phase
runs synchronous rounds of Broadcast(z) -> LocalUpdate(w_i + u_i / rho).
A Broadcast flagged ``deflate`` tells workers to deflate by the accepted
loading. Stop ends the session; every worker acknowledges with Result.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..admm import ALGORITHMS, PhaseSpec, RoundRecord, WorkerNode, _sink, build_schedule, run_schedule
from ..core import HyperParams, as_shards, validate_shards
from ..errors import (
    DimensionError,
    FedSpcaError,
    NumericalError,
    ProtocolError,
    SessionAborted,
    TransportError,
    ValidationError,
)
from .messages import MASTER, Kind, RoundMessage, check_shape, phase_tag
from .transport import Channel, TcpListener, connect, queue_pair

log = logging.getLogger(__name__)

TRANSPORTS = ("in_process", "tcp")


@dataclass
class SessionConfig:
    algorithm: str
    K: int
    params: HyperParams = field(default_factory=HyperParams)
    transport: str = "in_process"
    address: str | None = None
    deflate: int | None = None
    schedule: Sequence[HyperParams] | None = None
    trace: str | None = None
    seed: int | None = None
    center: bool = True
    timeout: float | None = 120.0
    threads: int | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"unknown algorithm {self.algorithm!r}")
        if self.K < 1:
            raise ValidationError(f"K must be >= 1, got {self.K}")
        if self.transport not in TRANSPORTS:
            raise ValidationError(f"transport must be one of {TRANSPORTS}, got {self.transport!r}")
        if self.threads is not None and self.threads < 1:
            raise ValidationError(f"threads must be >= 1, got {self.threads}")
        if self.seed is not None:
            self.params = self.params.replace(seed=int(self.seed))

    def resolved_schedule(self) -> list[HyperParams]:
        if self.schedule is not None:
            sched = list(self.schedule)
            if self.algorithm == "faspca":
                sched = [p.replace(r=1) for p in sched]
            return sched
        return build_schedule(self.algorithm, self.params, self.deflate)

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "K": self.K,
            "params": self.params.to_dict(),
            "transport": self.transport,
            "address": self.address,
            "deflate": self.deflate,
            "schedule": [p.to_dict() for p in self.resolved_schedule()],
            "trace": None if self.trace is None else str(self.trace),
            "seed": self.params.seed,
            "center": self.center,
        }


@dataclass
class SessionReport:
    config: dict
    workers: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    phase_rounds: list = field(default_factory=list)
    loadings: np.ndarray | None = None
    converged: bool = False
    messages: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0
    aborted: bool = False
    error: str | None = None

    @property
    def rounds(self) -> int:
        return len(self.trace)

    @property
    def final_cosine(self) -> float:
        return self.trace[-1].mean_abs_cosine if self.trace else float("nan")

    def to_dict(self) -> dict:
        def clean(x):
            return None if isinstance(x, float) and not np.isfinite(x) else x

        return {
            "config": self.config,
            "workers": self.workers,
            "rounds": self.rounds,
            "phase_rounds": self.phase_rounds,
            "converged": self.converged,
            "final_mean_abs_cosine": clean(self.final_cosine),
            "messages": self.messages,
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
            "aborted": self.aborted,
            "error": self.error,
            "trace": [{k: clean(v) for k, v in vars(rec).items()} for rec in self.trace],
        }


# --------------------------------------------------------------------------- worker


def _stats_meta(stats: dict) -> dict:
    return {k: (float(v) if isinstance(v, (float, np.floating)) else int(v)) for k, v in stats.items()}


def worker_loop(channel: Channel, shard, worker_id: int | None = None, gate=None) -> int:
    """Serve one master until Stop. Returns the number of local updates made.

    ``gate`` (a semaphore shared by co-located workers) bounds how many local
    solves run at once.

    Local solver failures are reported to the master in a Result message
    carrying an ``error`` entry instead of a silent disconnect.
    """
    node = WorkerNode(shard, worker_id)
    wid = node.worker_id
    d = node.dim
    updates = 0
    channel.send(RoundMessage(Kind.HELLO, 0, wid, meta={"worker_id": wid, "n": node.rows, "d": d}))
    channel.send(RoundMessage(Kind.CENTER_STATS, 0, wid, node.column_stats()))
    r = None
    try:
        while True:
            msg = channel.recv()
            if msg.kind is Kind.CENTER_MEAN:
                check_shape(msg, d, 1)
                node.center(msg.payload)
            elif msg.kind is Kind.BROADCAST:
                start = msg.meta.get("start")
                if start is not None:
                    params = HyperParams.from_dict(start["params"])
                    node.start_phase(PhaseSpec(start["algorithm"], params, int(start["index"])))
                    r = params.r
                if r is None:
                    raise ProtocolError("Broadcast before any phase was started")
                check_shape(msg, d, r)
                if msg.meta.get("deflate"):
                    node.deflate(msg.payload)
                    continue
                if gate is None:
                    v, stats = node.step(msg.payload)
                else:
                    with gate:
                        v, stats = node.step(msg.payload)
                updates += 1
                channel.send(RoundMessage(Kind.LOCAL_UPDATE, msg.round, wid, v,
                                          msg.algorithm, msg.phase, _stats_meta(stats)))
            elif msg.kind is Kind.STOP:
                channel.send(RoundMessage(Kind.RESULT, msg.round, wid, meta={"updates": updates}))
                return updates
            else:
                raise ProtocolError(f"worker cannot handle {msg.kind.value}")
    except TransportError:
        raise
    except Exception as exc:  # report, then leave
        try:
            channel.send(RoundMessage(Kind.RESULT, 0, wid, meta={
                "error": type(exc).__name__, "message": str(exc),
                "numerical": isinstance(exc, ArithmeticError)}))
        except FedSpcaError:
            pass
        raise
    finally:
        channel.close()


# --------------------------------------------------------------------------- master


class RemoteCohort:
    """Cohort interface over message channels, one per worker."""

    def __init__(self, channels: Sequence[Channel], hellos: Sequence[RoundMessage]):
        if not channels:
            raise ValidationError("need at least one worker")
        dims = {int(h.meta["d"]) for h in hellos}
        if len(dims) != 1:
            raise DimensionError(f"workers disagree on d: {sorted(dims)}")
        order = sorted(range(len(channels)), key=lambda i: hellos[i].meta["worker_id"])
        ids = [hellos[i].meta["worker_id"] for i in order]
        if len(set(ids)) != len(ids):
            raise ProtocolError(f"duplicate worker ids: {ids}")
        self.channels = [channels[i] for i in order]
        self.workers = [dict(hellos[i].meta) for i in order]
        self._dim = dims.pop()
        self._r = None
        self._spec = None
        self._start_pending = False

    @property
    def size(self) -> int:
        return len(self.channels)

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def bytes_sent(self) -> int:
        return sum(c.bytes_sent for c in self.channels)

    @property
    def bytes_received(self) -> int:
        return sum(c.bytes_received for c in self.channels)

    @property
    def messages(self) -> int:
        return sum(c.sent + c.received for c in self.channels)

    def _expect(self, channel: Channel, kind: Kind, r: int | None = None, round_: int | None = None):
        msg = channel.recv()
        if msg.kind is Kind.RESULT and "error" in msg.meta:
            text = f"worker {msg.sender} failed: {msg.meta['error']}: {msg.meta.get('message')}"
            if msg.meta.get("numerical"):
                raise NumericalError(text)
            raise ProtocolError(text)
        if msg.kind is not kind:
            raise ProtocolError(f"expected {kind.value}, got {msg.kind.value} from {msg.sender}")
        if round_ is not None and msg.round != round_:
            raise ProtocolError(f"expected round {round_}, got {msg.round} from {msg.sender}")
        check_shape(msg, self._dim, 1 if r is None else r)
        return msg

    def center(self, enabled: bool = True) -> np.ndarray | None:
        stats = [self._expect(c, Kind.CENTER_STATS).payload for c in self.channels]
        if not enabled:
            return None
        total = np.sum(stats, axis=0)
        if not total[-1] > 0:
            raise ValidationError("no rows to center")
        mean = total[:-1] / total[-1]
        for c in self.channels:
            c.send(RoundMessage(Kind.CENTER_MEAN, 0, MASTER, mean))
        return mean

    def start_phase(self, spec: PhaseSpec) -> None:
        self._spec = spec
        self._r = spec.params.r
        self._start_pending = True

    def round(self, z, t: int):
        spec = self._spec
        meta = {}
        if self._start_pending:
            meta["start"] = {"algorithm": spec.algorithm, "index": spec.index,
                             "params": spec.params.to_dict()}
            self._start_pending = False
        msg = RoundMessage(Kind.BROADCAST, t, MASTER, z, spec.algorithm, phase_tag(spec.index), meta)
        for c in self.channels:
            c.send(msg)
        replies = []
        for c in self.channels:
            m = self._expect(c, Kind.LOCAL_UPDATE, self._r, t)
            replies.append((m.payload, m.meta))
        return replies

    def deflate(self, z) -> None:
        spec = self._spec
        z = np.asarray(z, dtype=np.float64).reshape(self._dim, self._r)
        msg = RoundMessage(Kind.BROADCAST, 0, MASTER, z, spec.algorithm, phase_tag(spec.index),
                           {"deflate": True})
        for c in self.channels:
            c.send(msg)

    def finish(self, z) -> None:
        for c in self.channels:
            c.send(RoundMessage(Kind.STOP, 0, MASTER))
        for c in self.channels:
            self._expect(c, Kind.RESULT)

    def close(self) -> None:
        for c in self.channels:
            c.close()


class _WorkerThreads:
    """Local workers on threads; their exceptions are kept for diagnostics."""

    def __init__(self):
        self.threads = []
        self.errors = []

    def spawn(self, target, *args):
        def run():
            try:
                target(*args)
            except BaseException as exc:  # surfaced through the master side
                self.errors.append(exc)

        th = threading.Thread(target=run, daemon=True)
        th.start()
        self.threads.append(th)

    def join(self, timeout=5.0):
        for th in self.threads:
            th.join(timeout)


def _connect_tcp_workers(listener: TcpListener, shards, pool: _WorkerThreads, timeout):
    address = listener.address

    def serve(shard, wid):
        worker_loop(connect(address, timeout), shard, wid)

    for s in shards:
        pool.spawn(serve, s, s.worker_id)


def _open(cfg: SessionConfig, shards, pool: _WorkerThreads):
    """Return master-side channels, one per worker."""
    if cfg.transport == "in_process":
        if shards is None:
            raise ValidationError("in-process sessions need the shards")
        channels = []
        gate = threading.BoundedSemaphore(cfg.threads or len(shards))
        for s in shards:
            master_end, worker_end = queue_pair(cfg.timeout)
            pool.spawn(worker_loop, worker_end, s, s.worker_id, gate)
            channels.append(master_end)
        return channels, None
    listener = TcpListener(cfg.address, cfg.timeout)
    log.info("master listening on %s", listener.address)
    if shards is not None:
        _connect_tcp_workers(listener, shards, pool, cfg.timeout)
    try:
        channels = [listener.accept() for _ in range(cfg.K)]
    except TransportError:
        listener.close()
        raise
    return channels, listener


def run_session(cfg: SessionConfig, shards=None, listener: TcpListener | None = None):
    """Host one federated run.

    ``shards`` starts local workers (threads) for either transport; leave it
    out with the tcp transport to wait for ``cfg.K`` external workers. A
    pre-bound ``listener`` may be passed to learn the address before workers
    connect. Returns ``(LoadingMatrix, SessionReport)``.
    """
    if shards is not None:
        shards = as_shards(shards)
        validate_shards(shards)
        if len(shards) != cfg.K:
            raise ValidationError(f"config says K={cfg.K} but {len(shards)} shards were given")
    schedule = cfg.resolved_schedule()
    report = SessionReport(config=cfg.to_dict())
    pool = _WorkerThreads()
    if listener is not None:
        if cfg.transport != "tcp":
            raise ValidationError("a listener only makes sense with the tcp transport")
        if shards is not None:
            _connect_tcp_workers(listener, shards, pool, cfg.timeout)
        channels = [listener.accept() for _ in range(cfg.K)]
    else:
        channels, listener = _open(cfg, shards, pool)
    cohort = None
    sink = _sink(cfg.trace)

    def on_round(rec: RoundRecord):
        report.trace.append(rec)
        if sink is not None:
            sink(rec)

    try:
        hellos = []
        for c in channels:
            h = c.recv()
            if h.kind is not Kind.HELLO:
                raise ProtocolError(f"expected Hello, got {h.kind.value}")
            hellos.append(h)
        cohort = RemoteCohort(channels, hellos)
        report.workers = cohort.workers
        cohort.center(cfg.center)
        result = run_schedule(cohort, cfg.algorithm, schedule, trace=on_round)
    except (TransportError, ProtocolError) as exc:
        report.aborted, report.error = True, str(exc)
        _tally(report, channels)
        for c in channels:
            c.close()
        pool.join(1.0)
        raise SessionAborted(f"session aborted after {report.rounds} rounds: {exc}", report) from exc
    except BaseException:
        for c in channels:
            c.close()
        pool.join(1.0)
        raise
    finally:
        if listener is not None:
            listener.close()
    pool.join()
    for c in channels:
        c.close()
    _tally(report, channels)
    report.phase_rounds = [ph.rounds for ph in result.phases]
    report.converged = result.converged
    report.loadings = result.loadings.values
    return result.loadings, report


def _tally(report: SessionReport, channels) -> None:
    report.bytes_sent = sum(c.bytes_sent for c in channels)
    report.bytes_received = sum(c.bytes_received for c in channels)
    report.messages = sum(c.sent + c.received for c in channels)
