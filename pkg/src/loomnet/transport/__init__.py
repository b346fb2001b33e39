"""Point-to-point traffic generation: simulated and stream-socket endpoints."""

from __future__ import annotations

from typing import Mapping

from .base import (
    ACK_FLAG,
    FRAME_MAGIC,
    BufferOverflowError,
    Completion,
    Endpoint,
    LengthMismatchError,
    ProtocolError,
    RankCollisionError,
    TransportError,
    WireFrame,
)
from .sim import SimEndpoint, SimFabric
from .sockets import Coordinator, RendezvousClient, SocketEndpoint, connect_socket_mesh


def connect_mesh(rank: int, host_map: SimFabric | Mapping[int, str], rendezvous: str | None = None,
                 **kwargs) -> Endpoint:
    """Return a connected endpoint for ``rank``.

    ``host_map`` is either a shared :class:`SimFabric` or a ``rank -> "host:port"``
    map for the socket backend (with ``rendezvous`` naming the coordinator when
    listen ports are only known at runtime).
    """
    if isinstance(host_map, SimFabric):
        return host_map.endpoint(rank)
    ep, client = connect_socket_mesh(rank, host_map, rendezvous, **kwargs)
    ep.rendezvous = client
    return ep


__all__ = [
    "ACK_FLAG",
    "FRAME_MAGIC",
    "BufferOverflowError",
    "Completion",
    "Coordinator",
    "Endpoint",
    "LengthMismatchError",
    "ProtocolError",
    "RankCollisionError",
    "RendezvousClient",
    "SimEndpoint",
    "SimFabric",
    "SocketEndpoint",
    "TransportError",
    "WireFrame",
    "connect_mesh",
    "connect_socket_mesh",
]
