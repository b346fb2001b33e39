"""Flow-level network model with max-min fair sharing and timed anomalies.

Messages are fluid flows. Every capacitated resource on a flow's path (source
NIC egress, destination NIC ingress, and for two-tier fabrics the directed
leaf-to-leaf uplink) is shared max-min fairly, and rates are recomputed
whenever a flow starts or finishes or an anomaly switches on or off. A flow of
``s`` bytes finishes once its integrated rate has moved ``s`` bytes, plus the
path latency fixed when the flow started.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .clock import EventLoop, TimerHandle

# 1 Gb/s expressed in bytes per microsecond.
GBPS_TO_BYTES_PER_US = 1e9 / 8 / 1e6


class FabricKind(str, enum.Enum):
    FULL_MESH = "FULL_MESH"
    TWO_TIER = "TWO_TIER"


class AnomalyEffect(str, enum.Enum):
    BANDWIDTH_SCALE = "BANDWIDTH_SCALE"
    ADDED_LATENCY = "ADDED_LATENCY"
    LINK_DOWN = "LINK_DOWN"


class NetworkError(RuntimeError):
    pass


class LinkDownError(NetworkError):
    pass


@dataclass(frozen=True)
class Host:
    id: int
    nic_gbps: float
    latency_us: float = 0.0
    leaf: int | None = None


@dataclass(frozen=True)
class Topology:
    hosts: tuple[Host, ...]
    fabric: FabricKind = FabricKind.FULL_MESH
    uplink_gbps: float | None = None

    def __post_init__(self):
        if not self.hosts:
            raise ValueError("topology needs at least one host")
        ids = [h.id for h in self.hosts]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate host ids")
        for h in self.hosts:
            if not h.nic_gbps > 0:
                raise ValueError(f"host {h.id}: nic_gbps must be > 0")
            if h.latency_us < 0:
                raise ValueError(f"host {h.id}: latency_us must be >= 0")
        if self.fabric is FabricKind.TWO_TIER:
            if self.uplink_gbps is None or not self.uplink_gbps > 0:
                raise ValueError("TWO_TIER fabric needs uplink_gbps > 0")
            if any(h.leaf is None for h in self.hosts):
                raise ValueError("TWO_TIER fabric needs a leaf on every host")

    @classmethod
    def uniform(cls, num_hosts: int, nic_gbps: float = 100.0, latency_us: float = 1.0) -> "Topology":
        return cls(tuple(Host(i, nic_gbps, latency_us) for i in range(num_hosts)))

    def host(self, host_id: int) -> Host:
        for h in self.hosts:
            if h.id == host_id:
                return h
        raise KeyError(f"unknown host {host_id}")

    def host_for_rank(self, rank: int) -> Host:
        if not 0 <= rank < len(self.hosts):
            raise ValueError(f"rank {rank} has no host (topology has {len(self.hosts)} hosts)")
        return self.hosts[rank]

    def capacities(self) -> dict[str, float]:
        caps = {}
        for h in self.hosts:
            caps[f"egress:{h.id}"] = h.nic_gbps
            caps[f"ingress:{h.id}"] = h.nic_gbps
        if self.fabric is FabricKind.TWO_TIER:
            leaves = sorted({h.leaf for h in self.hosts})
            for a, b in itertools.permutations(leaves, 2):
                caps[f"uplink:{a}-{b}"] = self.uplink_gbps
        return caps

    def path(self, src: int, dst: int) -> tuple[str, ...]:
        if src == dst:
            raise NetworkError(f"flow from host {src} to itself (intra-node traffic is not modeled)")
        s, d = self.host(src), self.host(dst)
        path = [f"egress:{s.id}"]
        if self.fabric is FabricKind.TWO_TIER and s.leaf != d.leaf:
            path.append(f"uplink:{s.leaf}-{d.leaf}")
        path.append(f"ingress:{d.id}")
        return tuple(path)

    def target_resources(self, target: str) -> tuple[str, ...]:
        """Resources an anomaly target refers to: ``host:<id>`` or ``uplink:<a>-<b>``."""
        caps = self.capacities()
        if target.startswith("host:"):
            hid = int(target.split(":", 1)[1])
            self.host(hid)
            return (f"egress:{hid}", f"ingress:{hid}")
        if target in caps and target.startswith("uplink:"):
            return (target,)
        raise KeyError(f"unknown anomaly target {target!r}")

    def to_dict(self) -> dict:
        hosts = []
        for h in self.hosts:
            d = {"id": h.id, "nic_gbps": h.nic_gbps, "latency_us": h.latency_us}
            if h.leaf is not None:
                d["leaf"] = h.leaf
            hosts.append(d)
        fabric: dict = {"kind": self.fabric.value}
        if self.uplink_gbps is not None:
            fabric["uplink_gbps"] = self.uplink_gbps
        return {"hosts": hosts, "fabric": fabric}


def topology_from_dict(doc: Mapping) -> Topology:
    if set(doc) - {"hosts", "fabric"}:
        raise ValueError(f"unknown topology fields {sorted(set(doc) - {'hosts', 'fabric'})}")
    hosts = []
    for h in doc["hosts"]:
        extra = set(h) - {"id", "nic_gbps", "latency_us", "leaf"}
        if extra:
            raise ValueError(f"unknown host fields {sorted(extra)}")
        hosts.append(Host(int(h["id"]), float(h["nic_gbps"]), float(h.get("latency_us", 0.0)), h.get("leaf")))
    fabric = doc.get("fabric", {"kind": "FULL_MESH"})
    uplink = fabric.get("uplink_gbps")
    return Topology(tuple(hosts), FabricKind(fabric["kind"]), None if uplink is None else float(uplink))


def load_topology(path) -> Topology:
    with open(path, encoding="utf-8") as fh:
        return topology_from_dict(json.load(fh))


@dataclass(frozen=True)
class AnomalyEvent:
    at_us: float
    target: str
    effect: AnomalyEffect
    value: float | None = None
    duration_us: float = 0.0  # 0 = permanent

    def __post_init__(self):
        if self.at_us < 0:
            raise ValueError("at_us must be >= 0")
        if self.duration_us < 0:
            raise ValueError("duration_us must be >= 0")
        if self.effect is AnomalyEffect.BANDWIDTH_SCALE and not (self.value is not None and 0 < self.value <= 1):
            raise ValueError(f"BANDWIDTH_SCALE factor must be in (0, 1], got {self.value}")
        if self.effect is AnomalyEffect.ADDED_LATENCY and not (self.value is not None and self.value >= 0):
            raise ValueError("ADDED_LATENCY needs a value >= 0 (microseconds)")

    @property
    def end_us(self) -> float:
        return math.inf if self.duration_us == 0 else self.at_us + self.duration_us

    def active(self, t: float) -> bool:
        return self.at_us <= t < self.end_us

    def to_dict(self) -> dict:
        d = {"at_us": self.at_us, "duration_us": self.duration_us, "target": self.target,
             "effect": self.effect.value}
        if self.value is not None:
            d["value"] = self.value
        return d


def anomalies_from_list(items: Iterable[Mapping]) -> list[AnomalyEvent]:
    events = []
    for item in items:
        extra = set(item) - {"at_us", "duration_us", "target", "effect", "value"}
        if extra:
            raise ValueError(f"unknown anomaly fields {sorted(extra)}")
        target = item["target"]
        if isinstance(target, int):
            target = f"host:{target}"
        events.append(
            AnomalyEvent(
                at_us=float(item["at_us"]),
                target=str(target),
                effect=AnomalyEffect(item["effect"]),
                value=None if item.get("value") is None else float(item["value"]),
                duration_us=float(item.get("duration_us", 0.0)),
            )
        )
    return sorted(events, key=lambda e: e.at_us)


def load_anomalies(path) -> list[AnomalyEvent]:
    with open(path, encoding="utf-8") as fh:
        return anomalies_from_list(json.load(fh))


# ---------------------------------------------------------------------------
# rate allocation


def max_min_fair(paths: Mapping[int, Sequence[str]], capacities: Mapping[str, float]) -> dict[int, float]:
    """Water-filling max-min fair allocation.

    Repeatedly takes the resource offering the smallest equal share to its
    unfrozen flows, freezes those flows at that share, and charges it to every
    other resource they cross. Ties break on resource name, then flow id.
    """
    remaining = {r: float(capacities[r]) for p in paths.values() for r in p}
    users: dict[str, set[int]] = {r: set() for r in remaining}
    for fid, p in paths.items():
        for r in p:
            users[r].add(fid)
    rates: dict[int, float] = {}
    unfrozen = set(paths)
    while unfrozen:
        best = None
        for r in sorted(users):
            n = len(users[r] & unfrozen)
            if n:
                share = max(remaining[r], 0.0) / n
                if best is None or share < best[0]:
                    best = (share, r)
        if best is None:
            raise NetworkError("flow without any capacitated resource")
        share, r = best
        for fid in sorted(users[r] & unfrozen):
            rates[fid] = share
            unfrozen.discard(fid)
            for res in paths[fid]:
                remaining[res] -= share
    return rates


# ---------------------------------------------------------------------------
# fluid network


@dataclass(eq=False)
class Flow:
    id: int
    src: int
    dst: int
    size: int
    start_us: float
    latency_us: float
    path: tuple[str, ...]
    remaining: float = 0.0
    rate_gbps: float = 0.0
    transfer_end_us: float | None = None
    end_us: float | None = None
    error: str | None = None
    on_done: Callable[["Flow"], None] | None = field(default=None, repr=False)
    _predicted: float = field(default=math.inf, repr=False)

    @property
    def done(self) -> bool:
        return self.end_us is not None


class FluidNetwork:
    """Event-driven fluid simulation of a :class:`Topology`.

    The network owns no clock; it schedules its own transitions on ``loop``.
    """

    def __init__(self, topology: Topology, anomalies: Sequence[AnomalyEvent] = (), loop: EventLoop | None = None):
        self.topology = topology
        self.loop = loop or EventLoop()
        self.anomalies = sorted(anomalies, key=lambda e: e.at_us)
        self.base_capacity = topology.capacities()
        self.capacity = dict(self.base_capacity)
        self.down: set[str] = set()
        self.added_latency: dict[str, float] = {}
        self._active: dict[int, Flow] = {}
        self._ids = itertools.count()
        self._last = self.loop.now
        self._tick: TimerHandle | None = None
        for ev in self.anomalies:
            topology.target_resources(ev.target)  # raises on unknown target
        apply_anomalies(self, self.anomalies, self.loop.now)
        for t in sorted({e.at_us for e in self.anomalies} | {e.end_us for e in self.anomalies if e.duration_us}):
            if t >= self.loop.now:
                self.loop.call_at(t, self._on_anomaly_change)

    # -- public -------------------------------------------------------------

    def start_flow(self, src: int, dst: int, nbytes: int, on_done: Callable[[Flow], None] | None = None) -> Flow:
        """Start a flow between host ids ``src`` and ``dst`` now."""
        if nbytes < 0:
            raise ValueError("flow size must be >= 0")
        now = self.loop.now
        self._advance(now)
        path = self.topology.path(src, dst)
        latency = self.topology.host(src).latency_us + self.topology.host(dst).latency_us
        latency += sum(self.added_latency.get(t, 0.0) for t in self._latency_targets(src, dst))
        flow = Flow(next(self._ids), src, dst, nbytes, now, latency, path, remaining=float(nbytes), on_done=on_done)
        if any(r in self.down for r in path):
            self.loop.call_soon(lambda: self._fail(flow, "link down"))
            return flow
        if nbytes == 0:
            flow.transfer_end_us = now
            self.loop.call_at(now + latency, lambda: self._finish(flow))
            return flow
        self._active[flow.id] = flow
        self._reschedule()
        return flow

    def add_flow(self, src: int, dst: int, nbytes: int, at_us: float | None = None,
                 on_done: Callable[[Flow], None] | None = None) -> list[Flow]:
        """Schedule a flow start; the returned list is filled once it starts."""
        box: list[Flow] = []
        when = self.loop.now if at_us is None else at_us
        self.loop.call_at(when, lambda: box.append(self.start_flow(src, dst, nbytes, on_done)))
        return box

    def run(self, until: float | None = None) -> None:
        self.loop.run(until)

    def rates(self) -> dict[int, float]:
        return {fid: f.rate_gbps for fid, f in self._active.items()}

    @property
    def active_flows(self) -> list[Flow]:
        return [self._active[k] for k in sorted(self._active)]

    # -- internals ----------------------------------------------------------

    def _latency_targets(self, src: int, dst: int) -> list[str]:
        targets = [f"host:{src}", f"host:{dst}"]
        s, d = self.topology.host(src), self.topology.host(dst)
        if self.topology.fabric is FabricKind.TWO_TIER and s.leaf != d.leaf:
            targets.append(f"uplink:{s.leaf}-{d.leaf}")
        return targets

    def _advance(self, now: float) -> None:
        dt = now - self._last
        if dt > 0:
            for f in self._active.values():
                f.remaining = max(0.0, f.remaining - f.rate_gbps * GBPS_TO_BYTES_PER_US * dt)
        self._last = now

    def _reschedule(self) -> None:
        recompute_rates(self)
        if self._tick is not None:
            self._tick.cancel()
            self._tick = None
        now = self.loop.now
        best = math.inf
        for f in self._active.values():
            bps = f.rate_gbps * GBPS_TO_BYTES_PER_US
            f._predicted = now + f.remaining / bps if bps > 0 else math.inf
            best = min(best, f._predicted)
        if best < math.inf:
            self._tick = self.loop.call_at(best, self._on_tick)

    def _on_tick(self) -> None:
        self._tick = None
        now = self.loop.now
        self._advance(now)
        finished = [f for f in self._active.values() if f._predicted <= now or f.remaining <= 1e-6]
        for f in sorted(finished, key=lambda f: f.id):
            del self._active[f.id]
            f.remaining = 0.0
            f.rate_gbps = 0.0
            f.transfer_end_us = now
            self.loop.call_at(now + f.latency_us, lambda f=f: self._finish(f))
        self._reschedule()

    def _on_anomaly_change(self) -> None:
        now = self.loop.now
        self._advance(now)
        apply_anomalies(self, self.anomalies, now)
        for f in list(self.active_flows):
            if any(r in self.down for r in f.path):
                del self._active[f.id]
                self._fail(f, "link down")
        self._reschedule()

    def _finish(self, flow: Flow) -> None:
        flow.end_us = self.loop.now
        if flow.on_done is not None:
            flow.on_done(flow)

    def _fail(self, flow: Flow, reason: str) -> None:
        flow.error = reason
        flow.rate_gbps = 0.0
        self._finish(flow)


def recompute_rates(network: FluidNetwork) -> dict[int, float]:
    """Assign max-min fair rates (Gb/s) to every active flow of ``network``."""
    flows = network._active
    rates = max_min_fair({fid: f.path for fid, f in flows.items()}, network.capacity)
    for fid, r in rates.items():
        flows[fid].rate_gbps = r
    return rates


def apply_anomalies(network: FluidNetwork, timeline: Sequence[AnomalyEvent], now_us: float) -> None:
    """Set ``network``'s effective capacities and latencies to those in force at ``now_us``.

    State is rebuilt from the base topology, so an expired event leaves no trace.
    """
    topo = network.topology
    capacity = dict(network.base_capacity)
    down: set[str] = set()
    latency: dict[str, float] = {}
    for ev in timeline:
        resources = topo.target_resources(ev.target)
        if not ev.active(now_us):
            continue
        if ev.effect is AnomalyEffect.BANDWIDTH_SCALE:
            for r in resources:
                capacity[r] *= ev.value
        elif ev.effect is AnomalyEffect.ADDED_LATENCY:
            latency[ev.target] = latency.get(ev.target, 0.0) + ev.value
        else:
            down.update(resources)
    for r in down:
        capacity[r] = 0.0
    network.capacity = capacity
    network.down = down
    network.added_latency = latency


def deliver(network: FluidNetwork, src: int, dst: int, nbytes: int, at_us: float | None = None) -> float:
    """Run ``network`` until a flow ``src -> dst`` of ``nbytes`` completes; return its end time."""
    box = network.add_flow(src, dst, nbytes, at_us)
    while not (box and box[0].done):
        if not network.loop.step():
            raise NetworkError("network drained before the flow completed")
    flow = box[0]
    if flow.error:
        raise LinkDownError(f"flow {src}->{dst}: {flow.error}")
    return flow.end_us


def shape_real_endpoint(endpoint, timeline: Sequence[AnomalyEvent], base_gbps: float, host_id: int | None = None):
    """Install an egress shaper on a socket endpoint that follows ``timeline``.

    Only events targeting ``host:<host_id>`` (default: the endpoint's rank)
    apply. BANDWIDTH_SCALE scales the token-bucket rate, ADDED_LATENCY delays
    frame admission and LINK_DOWN pauses egress.
    """
    from .transport.shaping import EgressShaper

    host_id = endpoint.rank if host_id is None else host_id
    mine = [ev for ev in timeline if ev.target == f"host:{host_id}"]
    shaper = EgressShaper(base_gbps, mine, clock=endpoint.clock)
    endpoint.set_shaper(shaper)
    return shaper
