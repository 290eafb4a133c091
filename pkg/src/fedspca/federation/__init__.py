"""Master/worker orchestration: messages, transports and sessions."""

from .messages import MASTER, Kind, RoundMessage, check_shape, deserialize, payload_shape, serialize
from .session import RemoteCohort, SessionConfig, SessionReport, run_session, worker_loop
from .transport import BIND_ENV, TcpListener, bind_address, connect, parse_address, queue_pair

__all__ = [
    "BIND_ENV",
    "Kind",
    "MASTER",
    "RemoteCohort",
    "RoundMessage",
    "SessionConfig",
    "SessionReport",
    "TcpListener",
    "bind_address",
    "check_shape",
    "connect",
    "deserialize",
    "parse_address",
    "payload_shape",
    "queue_pair",
    "run_session",
    "serialize",
    "worker_loop",
]
