"""Endpoint contract shared by the simulated and socket backends."""

from __future__ import annotations

import abc
import struct
from collections import defaultdict, deque
from dataclasses import dataclass

FRAME_MAGIC = 0x474E4945
_HEADER = struct.Struct("<IQQ")
HEADER_SIZE = _HEADER.size
# Length-field flag marking a zero-payload acknowledgement frame.
ACK_FLAG = 1 << 63
MAX_TAG = (1 << 64) - 1

DEFAULT_UNEXPECTED_LIMIT = 64 * 1024 * 1024


class TransportError(RuntimeError):
    pass


class LengthMismatchError(TransportError):
    pass


class ProtocolError(TransportError):
    pass


class BufferOverflowError(TransportError):
    pass


class RankCollisionError(TransportError):
    pass


@dataclass(frozen=True)
class Completion:
    """One finished (or failed) operation.

    ``handle`` is None for endpoint-level failures not tied to a posted
    operation (protocol corruption, unexpected-buffer overflow).
    """

    handle: int | None
    op: str
    peer: int
    tag: int
    nbytes: int
    timestamp_us: float
    status: str = "ok"
    error: str | None = None
    payload: bytes | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass(frozen=True)
class WireFrame:
    tag: int
    length: int
    payload: bytes = b""
    ack: bool = False

    def encode(self) -> bytes:
        return encode_header(self.tag, self.length, self.ack) + (b"" if self.ack else self.payload)

    @classmethod
    def decode(cls, data: bytes) -> "WireFrame":
        tag, length, ack = decode_header(data[:HEADER_SIZE])
        payload = b"" if ack else bytes(data[HEADER_SIZE:HEADER_SIZE + length])
        if len(payload) != (0 if ack else length):
            raise ProtocolError(f"truncated frame: expected {length} payload bytes, got {len(payload)}")
        return cls(tag, length, payload, ack)


def encode_header(tag: int, length: int, ack: bool = False) -> bytes:
    if not 0 <= tag <= MAX_TAG:
        raise ValueError(f"tag out of range: {tag}")
    if not 0 <= length < ACK_FLAG:
        raise ValueError(f"length out of range: {length}")
    return _HEADER.pack(FRAME_MAGIC, tag, length | (ACK_FLAG if ack else 0))


def decode_header(data: bytes) -> tuple[int, int, bool]:
    if len(data) != HEADER_SIZE:
        raise ProtocolError(f"short frame header ({len(data)} bytes)")
    magic, tag, length = _HEADER.unpack(data)
    if magic != FRAME_MAGIC:
        raise ProtocolError(f"bad frame magic 0x{magic:08x}")
    return tag, length & ~ACK_FLAG, bool(length & ACK_FLAG)


class Endpoint(abc.ABC):
    """Point-to-point endpoint of one rank.

    Operations are posted from the owning rank's scheduler thread only;
    completions come back through :meth:`poll`.
    """

    rank: int

    @property
    @abc.abstractmethod
    def peers(self) -> frozenset[int]: ...

    @abc.abstractmethod
    def post_send(self, peer: int, nbytes: int, tag: int, payload: bytes | None = None) -> int: ...

    @abc.abstractmethod
    def post_recv(self, peer: int, nbytes: int, tag: int) -> int: ...

    @abc.abstractmethod
    def poll(self) -> list[Completion]: ...

    def wait(self, timeout: float | None) -> None:
        """Block until a completion may be available (no-op for virtual backends)."""

    def close(self) -> None:
        pass


class Matcher:
    """Posted-receive and unexpected-frame queues keyed by ``(peer, tag)``.

    Not thread safe; callers hold their own lock.
    """

    def __init__(self, unexpected_limit: int = DEFAULT_UNEXPECTED_LIMIT):
        self.unexpected_limit = unexpected_limit
        self._posted: dict[tuple[int, int], deque] = defaultdict(deque)
        self._early: dict[tuple[int, int], deque] = defaultdict(deque)
        self._buffered: dict[int, int] = defaultdict(int)

    def post(self, handle: int, peer: int, tag: int, nbytes: int):
        """Register a receive; returns an early ``(length, payload)`` if one was waiting."""
        q = self._early.get((peer, tag))
        if q:
            length, payload = q.popleft()
            self._buffered[peer] -= length
            return length, payload
        self._posted[(peer, tag)].append((handle, nbytes))
        return None

    def arrive(self, peer: int, tag: int, length: int, payload: bytes | None):
        """Match an arriving frame; returns ``(handle, posted_nbytes)`` or None if buffered."""
        q = self._posted.get((peer, tag))
        if q:
            return q.popleft()
        if self._buffered[peer] + length > self.unexpected_limit:
            raise BufferOverflowError(
                f"unexpected-message buffer for peer {peer} exceeds {self.unexpected_limit} bytes (tag {tag})"
            )
        self._buffered[peer] += length
        self._early[(peer, tag)].append((length, payload))
        return None

    def has_early(self, peer: int, tag: int) -> bool:
        return bool(self._early.get((peer, tag)))

    def drop_posted(self, peer: int) -> list[tuple[int, int, int]]:
        """Remove and return ``(handle, tag, nbytes)`` for receives posted on ``peer``."""
        out = []
        for (p, tag), q in self._posted.items():
            if p == peer:
                out.extend((h, tag, n) for h, n in q)
                q.clear()
        return out

    @property
    def buffered_bytes(self) -> dict[int, int]:
        return dict(self._buffered)
