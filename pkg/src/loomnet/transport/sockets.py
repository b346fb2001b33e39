"""Stream-socket backend, rendezvous coordinator and mesh bootstrap.

Every ordered rank pair ``i -> j`` gets its own TCP connection dialed by
``i``: ``i`` writes data frames on it and ``j`` answers each fully received
frame with a header-only acknowledgement on the reverse direction. A send
completes when its acknowledgement arrives.
"""

from __future__ import annotations

import itertools
import json
import logging
import queue
import socket
import struct
import threading
import time
from collections import defaultdict, deque
from typing import Mapping

from ..clock import Clock, ClockMode
from .base import (
    DEFAULT_UNEXPECTED_LIMIT,
    FRAME_MAGIC,
    HEADER_SIZE,
    BufferOverflowError,
    Completion,
    Endpoint,
    Matcher,
    ProtocolError,
    RankCollisionError,
    TransportError,
    decode_header,
    encode_header,
)

log = logging.getLogger(__name__)

PIECE_BYTES = 64 * 1024
_FILLER = memoryview(bytes([0xA5]) * (1 << 20))
_HELLO = struct.Struct("<II")
_MSG = struct.Struct("<II")


def parse_addr(addr: str | tuple[str, int]) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr[0], int(addr[1])
    host, sep, port = addr.rpartition(":")
    if not sep:
        return addr, 0
    return host or "127.0.0.1", int(port)


def format_addr(addr: tuple[str, int]) -> str:
    return f"{addr[0]}:{addr[1]}"


def _recv_exact(sock: socket.socket, n: int, into: bytearray | None = None) -> bytes | bytearray:
    buf = into if into is not None else bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:n])
        if k == 0:
            raise EOFError("connection closed")
        got += k
    return buf


def _discard(sock: socket.socket, n: int, scratch: bytearray) -> None:
    view = memoryview(scratch)
    while n > 0:
        k = sock.recv_into(view[: min(n, len(scratch))])
        if k == 0:
            raise EOFError("connection closed")
        n -= k


def dial(addr: tuple[str, int], retries: int = 10, backoff_s: float = 0.1) -> socket.socket:
    """Connect with exponential backoff; raises TransportError once the budget is spent."""
    delay = backoff_s
    last: Exception | None = None
    for attempt in range(retries + 1):
        try:
            sock = socket.create_connection(addr, timeout=10)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError as exc:
            last = exc
            if attempt < retries:
                time.sleep(delay)
                delay *= 2
    raise TransportError(f"peer {format_addr(addr)} unreachable after {retries} retries: {last}")


# ---------------------------------------------------------------------------
# endpoint


class _Peer:
    def __init__(self, rank: int):
        self.rank = rank
        self.out_sock: socket.socket | None = None
        self.in_sock: socket.socket | None = None
        self.sendq: queue.Queue = queue.Queue()
        # outbound: our frames and their acks; inbound: their frames
        self.out_open = False
        self.in_open = False

    @property
    def connected(self) -> bool:
        return self.out_open and self.in_open


class SocketEndpoint(Endpoint):
    def __init__(self, rank: int, bind: str | tuple[str, int] = ("127.0.0.1", 0), *,
                 clock: Clock | None = None, keep_payload: bool = False,
                 unexpected_limit: int = DEFAULT_UNEXPECTED_LIMIT):
        self.rank = rank
        self.clock = clock or Clock(ClockMode.REAL)
        self.keep_payload = keep_payload
        self.shaper = None
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._queue: list[Completion] = []
        self._handles = itertools.count(1)
        self._matcher = Matcher(unexpected_limit)
        self._awaiting_ack: dict[tuple[int, int], deque] = defaultdict(deque)
        self._peers: dict[int, _Peer] = {}
        self._closing = False
        self._threads: list[threading.Thread] = []
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind(parse_addr(bind))
        self._listener.listen(128)

    @property
    def listen_addr(self) -> str:
        return format_addr(self._listener.getsockname()[:2])

    @property
    def peers(self) -> frozenset[int]:
        return frozenset(p for p, link in self._peers.items() if link.connected)

    def set_shaper(self, shaper) -> None:
        self.shaper = shaper

    # -- bootstrap ----------------------------------------------------------

    def connect(self, host_map: Mapping[int, str], timeout: float = 60.0,
                retries: int = 10, backoff_s: float = 0.1) -> None:
        """Dial every other rank in ``host_map`` and accept their dials."""
        others = sorted(r for r in host_map if r != self.rank)
        for r in others:
            self._peers[r] = _Peer(r)
        accept_err: list[Exception] = []
        acceptor = threading.Thread(target=self._accept_all, args=(len(others), timeout, accept_err),
                                    name=f"accept-{self.rank}", daemon=True)
        acceptor.start()
        for r in others:
            sock = dial(parse_addr(host_map[r]), retries, backoff_s)
            sock.sendall(_HELLO.pack(FRAME_MAGIC, self.rank))
            sock.settimeout(timeout)
            magic, their = _HELLO.unpack(_recv_exact(sock, _HELLO.size))
            sock.settimeout(None)
            if magic != FRAME_MAGIC or their != r:
                raise ProtocolError(f"rank {self.rank}: handshake with {host_map[r]} returned rank {their}")
            self._peers[r].out_sock = sock
        acceptor.join(timeout)
        if acceptor.is_alive() or accept_err:
            raise TransportError(f"rank {self.rank}: inbound mesh incomplete: {accept_err or 'timeout'}")
        for r in others:
            peer = self._peers[r]
            peer.out_open = peer.in_open = True
            for target, name in ((self._send_loop, "send"), (self._ack_loop, "ack"), (self._data_loop, "data")):
                t = threading.Thread(target=target, args=(peer,), name=f"{name}-{self.rank}-{r}", daemon=True)
                t.start()
                self._threads.append(t)

    def _accept_all(self, expected: int, timeout: float, errors: list) -> None:
        self._listener.settimeout(timeout)
        try:
            while sum(1 for p in self._peers.values() if p.in_sock is not None) < expected:
                sock, _ = self._listener.accept()
                sock.settimeout(timeout)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                magic, their = _HELLO.unpack(_recv_exact(sock, _HELLO.size))
                if magic != FRAME_MAGIC or their not in self._peers or self._peers[their].in_sock is not None:
                    sock.close()
                    raise ProtocolError(f"rank {self.rank}: unexpected handshake from rank {their}")
                sock.sendall(_HELLO.pack(FRAME_MAGIC, self.rank))
                sock.settimeout(None)
                self._peers[their].in_sock = sock
        except Exception as exc:  # surfaced by connect()
            errors.append(exc)

    # -- contract -------------------------------------------------------------

    def _peer(self, peer: int, direction: str = "out") -> _Peer:
        link = self._peers.get(peer)
        is_open = link is not None and (link.out_open if direction == "out" else link.in_open)
        if not is_open or self._closing:
            raise TransportError(f"rank {self.rank}: peer {peer} not connected")
        return link

    def post_send(self, peer: int, nbytes: int, tag: int, payload: bytes | None = None) -> int:
        link = self._peer(peer)
        if nbytes < 0:
            raise ValueError("nbytes must be >= 0")
        if payload is not None and len(payload) != nbytes:
            raise ValueError(f"payload is {len(payload)} bytes, message is {nbytes}")
        with self._lock:
            if self._awaiting_ack[(peer, tag)]:
                raise TransportError(f"rank {self.rank}: tag {tag} already in flight to peer {peer}")
            handle = next(self._handles)
            self._awaiting_ack[(peer, tag)].append((handle, nbytes))
        link.sendq.put((tag, nbytes, payload))
        return handle

    def post_recv(self, peer: int, nbytes: int, tag: int) -> int:
        with self._lock:
            # a frame buffered before the peer hung up can still be matched
            if not self._matcher.has_early(peer, tag):
                self._peer(peer, "in")
            handle = next(self._handles)
            early = self._matcher.post(handle, peer, tag, nbytes)
            if early is not None:
                length, payload = early
                self._complete_recv(handle, peer, tag, nbytes, length, payload)
        return handle

    def poll(self) -> list[Completion]:
        with self._lock:
            out, self._queue = self._queue, []
        return out

    def wait(self, timeout: float | None) -> None:
        with self._cond:
            if not self._queue:
                self._cond.wait(timeout)

    def close(self) -> None:
        self._closing = True
        for link in self._peers.values():
            link.sendq.put(None)
            for s in (link.out_sock, link.in_sock):
                if s is not None:
                    try:
                        s.shutdown(socket.SHUT_RDWR)
                    except OSError:
                        pass
                    s.close()
        self._listener.close()

    # -- internals (lock held where noted) ----------------------------------

    def _push(self, c: Completion) -> None:  # lock held
        self._queue.append(c)
        self._cond.notify_all()

    def _complete_recv(self, handle, peer, tag, posted, length, payload) -> None:  # lock held
        now = self.clock.now_us
        if length != posted:
            self._push(Completion(handle, "recv", peer, tag, posted, now, "error",
                                  f"length mismatch on tag {tag}: posted {posted}, frame carries {length}"))
        else:
            self._push(Completion(handle, "recv", peer, tag, posted, now, payload=payload))

    def _link_lost(self, peer: int, exc: Exception, direction: str) -> None:
        """One direction of a peer link ended.

        Outbound loss fails sends still awaiting acks; inbound loss fails
        posted receives. A clean EOF with nothing outstanding is a normal
        shutdown. The two directions are separate sockets, so each side
        only judges its own operations.
        """
        if self._closing:
            return
        with self._lock:
            link = self._peers[peer]
            now = self.clock.now_us
            failed = 0
            if direction == "out":
                link.out_open = False
                for (p, tag), q in self._awaiting_ack.items():
                    while p == peer and q:
                        h, n = q.popleft()
                        self._push(Completion(h, "send", peer, tag, n, now, "error", f"peer {peer} disconnected"))
                        failed += 1
            else:
                link.in_open = False
                for h, tag, n in self._matcher.drop_posted(peer):
                    self._push(Completion(h, "recv", peer, tag, n, now, "error", f"peer {peer} disconnected"))
                    failed += 1
            if failed or not isinstance(exc, EOFError):
                log.error("rank %d: link to peer %d failed: %s", self.rank, peer, exc)
                self._push(Completion(None, "fatal", peer, 0, 0, now, "error", f"{type(exc).__name__}: {exc}"))

    def _send_loop(self, link: _Peer) -> None:
        sock = link.out_sock
        try:
            while True:
                item = link.sendq.get()
                if item is None:
                    return
                tag, nbytes, payload = item
                if self.shaper is not None:
                    self.shaper.admit_frame()
                sock.sendall(encode_header(tag, nbytes))
                src = memoryview(payload) if payload is not None else None
                off = 0
                while off < nbytes:
                    n = min(PIECE_BYTES, nbytes - off)
                    if self.shaper is not None:
                        self.shaper.acquire(n)
                    sock.sendall(src[off:off + n] if src is not None else _FILLER[:n])
                    off += n
        except OSError as exc:
            self._link_lost(link.rank, exc, "out")

    def _ack_loop(self, link: _Peer) -> None:
        sock = link.out_sock
        try:
            while True:
                tag, length, ack = decode_header(bytes(_recv_exact(sock, HEADER_SIZE)))
                if not ack:
                    raise ProtocolError(f"data frame (tag {tag}) on acknowledgement channel")
                with self._lock:
                    q = self._awaiting_ack.get((link.rank, tag))
                    if not q:
                        raise ProtocolError(f"acknowledgement for unknown tag {tag}")
                    handle, nbytes = q.popleft()
                    self._push(Completion(handle, "send", link.rank, tag, nbytes, self.clock.now_us))
        except (OSError, EOFError, ProtocolError) as exc:
            self._link_lost(link.rank, exc, "out")

    def _data_loop(self, link: _Peer) -> None:
        sock = link.in_sock
        scratch = bytearray(1 << 20)
        try:
            while True:
                tag, length, ack = decode_header(bytes(_recv_exact(sock, HEADER_SIZE)))
                if ack:
                    raise ProtocolError(f"acknowledgement (tag {tag}) on data channel")
                payload = None
                if self.keep_payload:
                    payload = bytes(_recv_exact(sock, length))
                else:
                    _discard(sock, length, scratch)
                sock.sendall(encode_header(tag, 0, ack=True))
                with self._lock:
                    try:
                        matched = self._matcher.arrive(link.rank, tag, length, payload)
                    except BufferOverflowError as exc:
                        self._push(Completion(None, "fatal", link.rank, tag, length, self.clock.now_us,
                                              "error", str(exc)))
                        continue
                    if matched is not None:
                        handle, posted = matched
                        self._complete_recv(handle, link.rank, tag, posted, length, payload)
        except (OSError, EOFError, ProtocolError) as exc:
            self._link_lost(link.rank, exc, "in")


# ---------------------------------------------------------------------------
# rendezvous


def send_msg(sock: socket.socket, obj) -> None:
    data = json.dumps(obj).encode("utf-8")
    sock.sendall(_MSG.pack(FRAME_MAGIC, len(data)) + data)


def recv_msg(sock: socket.socket):
    magic, n = _MSG.unpack(_recv_exact(sock, _MSG.size))
    if magic != FRAME_MAGIC:
        raise ProtocolError(f"bad rendezvous magic 0x{magic:08x}")
    return json.loads(bytes(_recv_exact(sock, n)).decode("utf-8"))


class Coordinator:
    """Collects ``{rank, listen_addr}`` registrations and hands out the host map.

    After the map it runs a start barrier (``ready`` -> ``go`` with a common
    start instant) and finally gathers one ``done`` message per rank.
    """

    def __init__(self, addr: str | tuple[str, int], num_ranks: int, timeout: float = 60.0):
        self.num_ranks = num_ranks
        self.timeout = timeout
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind(parse_addr(addr))
        self._sock.listen(num_ranks * 2)
        self.results: dict[int, dict] = {}
        self._addrs: dict[int, str] = {}
        self.error: Exception | None = None
        self._thread = threading.Thread(target=self._serve, name="coordinator", daemon=True)

    @property
    def address(self) -> str:
        return format_addr(self._sock.getsockname()[:2])

    def start(self) -> "Coordinator":
        self._thread.start()
        return self

    def join(self, timeout: float | None = None) -> dict[int, dict]:
        self._thread.join(timeout)
        if self._thread.is_alive():
            raise TransportError("coordinator timed out waiting for ranks")
        if self.error is not None:
            raise self.error
        return self.results

    def _serve(self) -> None:
        conns: dict[int, socket.socket] = {}
        try:
            self._sock.settimeout(self.timeout)
            while len(conns) < self.num_ranks:
                sock, _ = self._sock.accept()
                sock.settimeout(self.timeout)
                msg = recv_msg(sock)
                rank = msg.get("rank")
                if not isinstance(rank, int) or not 0 <= rank < self.num_ranks:
                    send_msg(sock, {"error": f"rank {rank!r} out of range"})
                    sock.close()
                    continue
                if rank in conns:
                    send_msg(sock, {"error": f"rank collision: rank {rank} already registered"})
                    sock.close()
                    continue
                conns[rank] = sock
                self._addrs[rank] = msg["listen_addr"]
            host_map = {str(r): self._addrs[r] for r in range(self.num_ranks)}
            for r in sorted(conns):
                send_msg(conns[r], {"host_map": host_map})
            for r in sorted(conns):
                msg = recv_msg(conns[r])
                if msg.get("state") != "ready":
                    raise ProtocolError(f"rank {r} sent {msg!r} instead of ready")
            start = time.time_ns() + 50_000_000
            for r in sorted(conns):
                send_msg(conns[r], {"go": start})
            for r in sorted(conns):
                conns[r].settimeout(None)
                self.results[r] = recv_msg(conns[r])
                send_msg(conns[r], {"bye": True})
        except Exception as exc:
            self.error = exc if isinstance(exc, TransportError) else TransportError(f"rendezvous failed: {exc}")
        finally:
            for s in conns.values():
                s.close()
            self._sock.close()


class RendezvousClient:
    def __init__(self, addr: str | tuple[str, int], timeout: float = 60.0, retries: int = 10,
                 backoff_s: float = 0.1):
        self.sock = dial(parse_addr(addr), retries, backoff_s)
        self.sock.settimeout(timeout)

    def register(self, rank: int, listen_addr: str) -> dict[int, str]:
        send_msg(self.sock, {"rank": rank, "listen_addr": listen_addr})
        reply = recv_msg(self.sock)
        if "error" in reply:
            err = reply["error"]
            raise (RankCollisionError if "collision" in err else TransportError)(err)
        return {int(k): v for k, v in reply["host_map"].items()}

    def barrier(self) -> int:
        """Signal readiness; returns the common start instant (unix ns)."""
        send_msg(self.sock, {"state": "ready"})
        return int(recv_msg(self.sock)["go"])

    def report(self, payload: dict) -> None:
        self.sock.settimeout(None)
        send_msg(self.sock, payload)
        recv_msg(self.sock)
        self.sock.close()


def connect_socket_mesh(rank: int, host_map: Mapping[int, str], rendezvous: str | None = None, *,
                        timeout: float = 60.0, keep_payload: bool = False,
                        clock: Clock | None = None) -> tuple[SocketEndpoint, RendezvousClient | None]:
    """Listen on ``host_map[rank]``, learn peers (via ``rendezvous`` if given) and connect."""
    ep = SocketEndpoint(rank, host_map[rank], clock=clock, keep_payload=keep_payload)
    client = None
    try:
        final = dict(host_map)
        if rendezvous is not None:
            client = RendezvousClient(rendezvous, timeout)
            final = client.register(rank, ep.listen_addr)
        ep.connect(final, timeout=timeout)
    except Exception:
        ep.close()
        raise
    return ep, client
