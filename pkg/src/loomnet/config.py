"""Run configuration: strict JSON with a fixed field set."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .collectives import supported_algorithms, validate_custom_schedule
from .netmodel import AnomalyEvent, Topology, load_anomalies, load_topology
from .workload import CollType, WorkloadGraph, load_workload, synthesize

FIELDS = {
    "workload", "mode", "transport", "topology", "anomalies", "hosts",
    "collective_algorithm", "seed", "output_dir", "iterations",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    workload: Any
    mode: str = "VIRTUAL"
    transport: str = "SIM"
    topology: str | None = None
    anomalies: str | None = None
    hosts: list[str] = field(default_factory=list)
    collective_algorithm: dict[str, str] = field(default_factory=dict)
    seed: int = 0
    output_dir: str = "out"
    iterations: int | None = None
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    def echo(self) -> dict:
        """JSON-safe copy of the fields, suitable for re-running."""
        return {k: getattr(self, k) for k in sorted(FIELDS)}

    def load_graph(self) -> WorkloadGraph:
        if isinstance(self.workload, dict):
            spec = dict(self.workload)
            if self.iterations is not None:
                spec["iterations"] = self.iterations
            return synthesize(spec)
        if self.iterations is not None:
            raise ConfigError("iterations override only applies to synthesized workloads")
        return load_workload(self.resolve(self.workload))

    def load_topology(self, num_ranks: int) -> Topology:
        if self.topology is None:
            return Topology.uniform(num_ranks)
        return load_topology(self.resolve(self.topology))

    def load_anomalies(self) -> list[AnomalyEvent]:
        return [] if self.anomalies is None else load_anomalies(self.resolve(self.anomalies))

    def algorithms(self, graph: WorkloadGraph) -> dict:
        out: dict = {}
        for name, algo in self.collective_algorithm.items():
            ctype = CollType(name)
            if algo.startswith("CUSTOM:"):
                doc = json.loads(self.resolve(algo[len("CUSTOM:"):]).read_bytes())
                for gid in {n.group_id for n in graph.all_nodes() if n.coll_type is ctype}:
                    if gid == doc.get("group_id"):
                        validate_custom_schedule(doc, graph.group(gid))
                out[ctype] = ("CUSTOM", doc)
            else:
                out[ctype] = algo
        return out


def config_from_dict(doc: Any, base_dir: Path | str = ".") -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - FIELDS)
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
    if "workload" not in doc:
        raise ConfigError("config needs a workload")
    cfg = RunConfig(**doc, base_dir=Path(base_dir))
    cfg.mode, cfg.transport = str(cfg.mode).upper(), str(cfg.transport).upper()
    if cfg.mode not in ("VIRTUAL", "REAL"):
        raise ConfigError(f"mode must be VIRTUAL or REAL, not {cfg.mode}")
    if cfg.transport not in ("SIM", "SOCKET"):
        raise ConfigError(f"transport must be SIM or SOCKET, not {cfg.transport}")
    if (cfg.mode == "VIRTUAL") != (cfg.transport == "SIM"):
        raise ConfigError("VIRTUAL mode runs on the SIM transport and REAL mode on SOCKET")
    if not isinstance(cfg.seed, int) or not 0 <= cfg.seed < 1 << 64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if cfg.iterations is not None and (not isinstance(cfg.iterations, int) or cfg.iterations < 1):
        raise ConfigError("iterations must be a positive integer")
    if not isinstance(cfg.workload, (str, dict)):
        raise ConfigError("workload must be a path or a synthesizer spec")
    for name, algo in cfg.collective_algorithm.items():
        try:
            ctype = CollType(name)
        except ValueError:
            raise ConfigError(f"unknown collective type {name!r}") from None
        base = algo.split(":", 1)[0]
        if base not in supported_algorithms(ctype) or (base == "CUSTOM") != algo.startswith("CUSTOM:"):
            raise ConfigError(f"algorithm {algo!r} not available for {name}; "
                              f"choose from {supported_algorithms(ctype)} (CUSTOM:<path>)")
    paths = [cfg.topology, cfg.anomalies] + [a[len("CUSTOM:"):] for a in cfg.collective_algorithm.values()
                                              if a.startswith("CUSTOM:")]
    if isinstance(cfg.workload, str):
        paths.append(cfg.workload)
    for p in paths:
        if p is not None and not cfg.resolve(p).exists():
            raise ConfigError(f"{p}: not found")
    return cfg


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: not found")
    try:
        doc = json.loads(path.read_bytes())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from None
    return config_from_dict(doc, path.parent)


def check_hosts(cfg: RunConfig, num_ranks: int) -> None:
    if cfg.transport == "SOCKET" and len(cfg.hosts) < num_ranks:
        raise ConfigError(f"hosts lists {len(cfg.hosts)} addresses for {num_ranks} ranks")
