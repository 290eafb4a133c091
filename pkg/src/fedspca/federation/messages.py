"""Round messages and their wire format.

A frame is a 4-byte big-endian length followed by one UTF-8 JSON object.
Matrix payloads travel as a ``shape`` list plus a flat row-major ``data``
list written with 17 significant digits, which round-trips float64 exactly.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import ProtocolError

MASTER = "master"
HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 30


class Kind(str, enum.Enum):
    HELLO = "Hello"
    CENTER_STATS = "CenterStats"
    CENTER_MEAN = "CenterMean"
    BROADCAST = "Broadcast"
    LOCAL_UPDATE = "LocalUpdate"
    STOP = "Stop"
    RESULT = "Result"


def phase_tag(index: int) -> str:
    return "main" if index == 0 else f"deflation-{index}"


def phase_index(tag: str) -> int:
    if not isinstance(tag, str):
        raise ProtocolError(f"bad phase tag {tag!r}")
    if tag == "main":
        return 0
    prefix = "deflation-"
    if not tag.startswith(prefix) or not tag[len(prefix):].isdigit():
        raise ProtocolError(f"bad phase tag {tag!r}")
    return int(tag[len(prefix):])


@dataclass(eq=False)
class RoundMessage:
    kind: Kind
    round: int = 0
    sender: int | str = MASTER
    payload: np.ndarray | None = None
    algorithm: str | None = None
    phase: str = "main"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            self.kind = Kind(self.kind)
        except ValueError as exc:
            raise ProtocolError(f"unknown message kind {self.kind!r}") from exc
        if self.payload is not None:
            self.payload = np.asarray(self.payload, dtype=np.float64)

    def __eq__(self, other):
        if not isinstance(other, RoundMessage):
            return NotImplemented
        same_payload = (
            (self.payload is None and other.payload is None)
            or (self.payload is not None and other.payload is not None
                and self.payload.shape == other.payload.shape
                and np.array_equal(self.payload, other.payload, equal_nan=True))
        )
        return (same_payload and self.kind == other.kind and self.round == other.round
                and self.sender == other.sender and self.algorithm == other.algorithm
                and self.phase == other.phase and self.meta == other.meta)


def payload_shape(kind: Kind, d: int, r: int) -> tuple | None:
    """The only payload shape each kind may carry in a session of size (d, r).

    Nothing is larger than d * r or d + 1 values, so no message can carry
    shard rows.
    """
    kind = Kind(kind)
    if kind in (Kind.BROADCAST, Kind.LOCAL_UPDATE):
        return (d, r)
    if kind is Kind.CENTER_STATS:
        return (d + 1,)
    if kind is Kind.CENTER_MEAN:
        return (d,)
    return None


def check_shape(msg: RoundMessage, d: int, r: int) -> None:
    expected = payload_shape(msg.kind, d, r)
    got = None if msg.payload is None else msg.payload.shape
    if got != expected:
        raise ProtocolError(f"{msg.kind.value} payload has shape {got}, session expects {expected}")


def _format(values: np.ndarray) -> str:
    flat = values.ravel()
    if not np.all(np.isfinite(flat)):
        raise ProtocolError("refusing to serialize a non-finite payload")
    return "[" + ",".join("%.17g" % x for x in flat) + "]"


def serialize(msg: RoundMessage) -> bytes:
    """Encode one message as a length-prefixed frame."""
    head = {
        "kind": msg.kind.value,
        "round": int(msg.round),
        "sender": msg.sender,
        "algorithm": msg.algorithm,
        "phase": msg.phase,
        "meta": msg.meta,
        "shape": None if msg.payload is None else list(msg.payload.shape),
    }
    text = json.dumps(head, separators=(",", ":"))
    data = "null" if msg.payload is None else _format(msg.payload)
    body = (text[:-1] + ',"data":' + data + "}").encode("utf-8")
    if len(body) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(body)} bytes exceeds the limit")
    return HEADER.pack(len(body)) + body


def frame_length(header: bytes) -> int:
    if len(header) != HEADER.size:
        raise ProtocolError("truncated frame header")
    (n,) = HEADER.unpack(header)
    if n == 0:
        raise ProtocolError("zero-length frame")
    if n > MAX_FRAME:
        raise ProtocolError(f"frame length {n} exceeds the limit")
    return n


def decode_body(body: bytes) -> RoundMessage:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed frame body: {exc}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("frame body is not a JSON object")
    missing = {"kind", "round", "sender", "shape", "data"} - set(obj)
    if missing:
        raise ProtocolError(f"frame is missing {sorted(missing)}")
    try:
        kind = Kind(obj["kind"])
    except ValueError as exc:
        raise ProtocolError(f"unknown message kind {obj['kind']!r}") from exc
    if not isinstance(obj["round"], int) or isinstance(obj["round"], bool):
        raise ProtocolError(f"bad round number {obj['round']!r}")
    shape, data = obj["shape"], obj["data"]
    if shape is None:
        if data is not None:
            raise ProtocolError("payload data without a shape")
        payload = None
    else:
        if not isinstance(shape, list) or not all(type(s) is int and s >= 0 for s in shape):
            raise ProtocolError(f"bad shape {shape!r}")
        if not isinstance(data, list) or len(data) != int(np.prod(shape, dtype=np.int64)):
            raise ProtocolError(f"payload length does not match shape {shape}")
        try:
            payload = np.array(data, dtype=np.float64).reshape(shape)
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"non-numeric payload: {exc}") from exc
    phase = obj.get("phase", "main")
    phase_index(phase)
    meta = obj.get("meta") or {}
    if not isinstance(meta, dict):
        raise ProtocolError("meta must be an object")
    return RoundMessage(kind, obj["round"], obj["sender"], payload,
                        obj.get("algorithm"), phase, meta)


def deserialize(frame: bytes) -> RoundMessage:
    """Decode exactly one complete frame."""
    frame = bytes(frame)
    n = frame_length(frame[:HEADER.size])
    body = frame[HEADER.size:]
    if len(body) < n:
        raise ProtocolError(f"truncated frame: header says {n} bytes, got {len(body)}")
    if len(body) > n:
        raise ProtocolError(f"{len(body) - n} trailing bytes after frame")
    return decode_body(body)
