"""Deterministic simulated transport on top of :class:`~loomnet.netmodel.FluidNetwork`."""

from __future__ import annotations

import itertools
from typing import Callable

from ..netmodel import Flow, FluidNetwork
from .base import (
    DEFAULT_UNEXPECTED_LIMIT,
    BufferOverflowError,
    Completion,
    Endpoint,
    Matcher,
    TransportError,
)


class SimFabric:
    """Shared simulated network handle; one :class:`SimEndpoint` per rank.

    Rank ``r`` sits on ``topology.hosts[r]``. A message becomes one flow that
    starts when the send is posted; the send completes at delivery, and the
    receive completes at ``max(delivery, post time)``.
    """

    def __init__(self, network: FluidNetwork, num_ranks: int, unexpected_limit: int = DEFAULT_UNEXPECTED_LIMIT):
        self.network = network
        self.loop = network.loop
        self.num_ranks = num_ranks
        self.unexpected_limit = unexpected_limit
        self._hosts = [network.topology.host_for_rank(r).id for r in range(num_ranks)]
        self._endpoints: dict[int, SimEndpoint] = {}

    def host_of(self, rank: int) -> int:
        return self._hosts[rank]

    def endpoint(self, rank: int) -> "SimEndpoint":
        if not 0 <= rank < self.num_ranks:
            raise TransportError(f"rank {rank} outside simulated fabric of {self.num_ranks}")
        if rank not in self._endpoints:
            self._endpoints[rank] = SimEndpoint(self, rank)
        return self._endpoints[rank]

    def endpoints(self) -> list["SimEndpoint"]:
        return [self.endpoint(r) for r in range(self.num_ranks)]


class SimEndpoint(Endpoint):
    def __init__(self, fabric: SimFabric, rank: int):
        self.fabric = fabric
        self.rank = rank
        self._handles = itertools.count(1)
        self._queue: list[Completion] = []
        self._matcher = Matcher(fabric.unexpected_limit)
        self._sends_in_flight: set[tuple[int, int]] = set()
        self.notify: Callable[[], None] | None = None
        self._notify_pending = False

    @property
    def peers(self) -> frozenset[int]:
        return frozenset(r for r in range(self.fabric.num_ranks) if r != self.rank)

    def _check_peer(self, peer: int) -> None:
        if peer not in self.peers:
            raise TransportError(f"rank {self.rank}: peer {peer} not connected")

    def post_send(self, peer: int, nbytes: int, tag: int, payload: bytes | None = None) -> int:
        self._check_peer(peer)
        if nbytes < 0:
            raise ValueError("nbytes must be >= 0")
        if payload is not None and len(payload) != nbytes:
            raise ValueError(f"payload is {len(payload)} bytes, message is {nbytes}")
        if (peer, tag) in self._sends_in_flight:
            raise TransportError(f"rank {self.rank}: tag {tag} already in flight to peer {peer}")
        self._sends_in_flight.add((peer, tag))
        handle = next(self._handles)

        def done(flow: Flow) -> None:
            self._sends_in_flight.discard((peer, tag))
            now = self.fabric.loop.now
            if flow.error:
                self._push(Completion(handle, "send", peer, tag, nbytes, now, "error", flow.error))
                return
            self._push(Completion(handle, "send", peer, tag, nbytes, now))
            self.fabric.endpoint(peer)._on_frame(self.rank, tag, nbytes, payload)

        self.fabric.network.start_flow(self.fabric.host_of(self.rank), self.fabric.host_of(peer), nbytes, done)
        return handle

    def post_recv(self, peer: int, nbytes: int, tag: int) -> int:
        self._check_peer(peer)
        handle = next(self._handles)
        early = self._matcher.post(handle, peer, tag, nbytes)
        if early is not None:
            length, payload = early
            self._complete_recv(handle, peer, tag, nbytes, length, payload)
        return handle

    def _on_frame(self, src: int, tag: int, length: int, payload: bytes | None) -> None:
        try:
            matched = self._matcher.arrive(src, tag, length, payload)
        except BufferOverflowError as exc:
            self._push(Completion(None, "fatal", src, tag, length, self.fabric.loop.now, "error", str(exc)))
            return
        if matched is not None:
            handle, posted = matched
            self._complete_recv(handle, src, tag, posted, length, payload)

    def _complete_recv(self, handle, peer, tag, posted, length, payload) -> None:
        now = self.fabric.loop.now
        if length != posted:
            self._push(Completion(handle, "recv", peer, tag, posted, now, "error",
                                  f"length mismatch on tag {tag}: posted {posted}, frame carries {length}"))
        else:
            self._push(Completion(handle, "recv", peer, tag, posted, now, payload=payload))

    def _push(self, completion: Completion) -> None:
        self._queue.append(completion)
        if self.notify is not None and not self._notify_pending:
            self._notify_pending = True
            self.fabric.loop.call_soon(self._fire_notify)

    def _fire_notify(self) -> None:
        self._notify_pending = False
        if self.notify is not None:
            self.notify()

    def poll(self) -> list[Completion]:
        out, self._queue = self._queue, []
        return out
