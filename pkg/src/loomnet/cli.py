"""Command line: validate, synth, run and compare.

Exit codes: 0 success, 1 usage or configuration error, 2 anomaly flagged,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import socket
import subprocess
import sys
import time
from pathlib import Path

from . import metrics
from .collectives import CustomScheduleError
from .config import ConfigError, RunConfig, check_hosts, load_config
from .netmodel import NetworkError
from .runtime import run_socket_rank, run_virtual
from .scheduler import DeadlockError, OpRecord
from .transport.base import TransportError
from .transport.sockets import Coordinator, format_addr, parse_addr
from .workload import WorkloadError, WorkloadSemanticError, load_workload, serialize_workload, synthesize, validate

EXIT_OK, EXIT_USAGE, EXIT_ANOMALY, EXIT_RUNTIME = 0, 1, 2, 3

OUTPUT_FILES = {
    metrics.REPORT_JSON: "report.json",
    metrics.TRACE_JSON: "trace.json",
    metrics.CSV_ITER: "iterations.csv",
}

log = logging.getLogger("loomnet")


def _setup_logging() -> None:
    level = os.environ.get("LOOMNET_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# ---------------------------------------------------------------------------
# validate / synth


def cmd_validate(path: str) -> int:
    if not Path(path).exists():
        _err(f"{path}: not found")
        return EXIT_USAGE
    try:
        graph = load_workload(path)
    except WorkloadSemanticError as exc:
        for v in exc.violations:
            print(v)
        return EXIT_USAGE
    except WorkloadError as exc:
        _err(f"{path}: {exc}")
        return EXIT_USAGE
    problems = validate(graph)
    for v in problems:
        print(v)
    if problems:
        return EXIT_USAGE
    print(f"ok: {graph.num_ranks} ranks, {len(graph)} nodes")
    return EXIT_OK


def cmd_synth(spec_path: str, out: str) -> int:
    try:
        spec = json.loads(Path(spec_path).read_bytes())
        graph = synthesize(spec)
    except FileNotFoundError:
        _err(f"{spec_path}: not found")
        return EXIT_USAGE
    except (ValueError, json.JSONDecodeError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    Path(out).write_bytes(serialize_workload(graph))
    return EXIT_OK


# ---------------------------------------------------------------------------
# run


def write_outputs(report: metrics.RunReport, output_dir: Path) -> list[Path]:
    output_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt, name in OUTPUT_FILES.items():
        p = output_dir / name
        p.write_bytes(metrics.export_trace(report, fmt))
        written.append(p)
    return written


def _run_virtual(cfg: RunConfig) -> int:
    graph = cfg.load_graph()
    run = run_virtual(graph, cfg.load_topology(graph.num_ranks), cfg.load_anomalies(),
                      algorithms=cfg.algorithms(graph), seed=cfg.seed)
    report = metrics.build_report(graph, run.records, "VIRTUAL", cfg.echo())
    write_outputs(report, cfg.resolve(cfg.output_dir))
    return EXIT_OK


def _free_port(host: str) -> int:
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def _launch_local(cfg: RunConfig, config_path: str, num_ranks: int, timeout_s: float) -> int:
    """One child process per rank; rank 0 hosts the coordinator and writes outputs."""
    host = parse_addr(cfg.hosts[0])[0]
    coordinator = format_addr((host, _free_port(host)))
    procs = [subprocess.Popen([sys.executable, "-m", "loomnet", "run", "-c", config_path,
                               "--rank", str(r), "--coordinator", coordinator])
             for r in range(num_ranks)]
    deadline = time.monotonic() + timeout_s
    try:
        while True:
            codes = [p.poll() for p in procs]
            failed = [(r, c) for r, c in enumerate(codes) if c not in (None, 0)]
            if failed:
                _err(f"rank {failed[0][0]} exited with status {failed[0][1]}")
                return EXIT_RUNTIME
            if all(c == 0 for c in codes):
                return EXIT_OK
            if time.monotonic() > deadline:
                _err("ranks did not finish in time")
                return EXIT_RUNTIME
            time.sleep(0.02)
    finally:
        for p in procs:
            if p.poll() is None:
                p.kill()
                p.wait()


def _run_rank(cfg: RunConfig, rank: int, coordinator: str | None, num_ranks: int, graph) -> int:
    if not 0 <= rank < num_ranks:
        raise ConfigError(f"--rank {rank} outside 0..{num_ranks - 1}")
    coordinator = coordinator or cfg.hosts[0]
    bind = cfg.hosts[rank]
    coord = None
    if rank == 0:
        coord = Coordinator(coordinator, num_ranks).start()
        if parse_addr(coordinator) == parse_addr(bind):
            bind = format_addr((parse_addr(bind)[0], 0))
    topology = cfg.load_topology(num_ranks)
    run_socket_rank(graph, rank, bind, rendezvous=coordinator, topology=topology, anomalies=cfg.load_anomalies(),
                    algorithms=cfg.algorithms(graph), seed=cfg.seed)
    if coord is not None:
        results = coord.join()
        records = [OpRecord(**r) for res in results.values() for r in res["records"]]
        report = metrics.build_report(graph, records, "REAL", cfg.echo())
        write_outputs(report, cfg.resolve(cfg.output_dir))
    return EXIT_OK


def cmd_run(config_path: str, rank: int | None = None, coordinator: str | None = None,
            timeout_s: float = 600.0) -> int:
    try:
        cfg = load_config(config_path)
        if cfg.mode == "VIRTUAL":
            if rank is not None or coordinator is not None:
                raise ConfigError("--rank/--coordinator only apply to REAL runs")
            return _run_virtual(cfg)
        graph = cfg.load_graph()
        check_hosts(cfg, graph.num_ranks)
        cfg.algorithms(graph)
        if rank is None:
            return _launch_local(cfg, config_path, graph.num_ranks, timeout_s)
        return _run_rank(cfg, rank, coordinator, graph.num_ranks, graph)
    except (ConfigError, WorkloadError, CustomScheduleError, NetworkError, FileNotFoundError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except (DeadlockError, TransportError, OSError) as exc:
        _err(f"run failed: {exc}")
        return EXIT_RUNTIME
    except ValueError as exc:
        _err(str(exc))
        return EXIT_USAGE


# ---------------------------------------------------------------------------
# compare


def cmd_compare(measured: str, predicted: str, out: str | None = None,
                threshold: float = metrics.DEFAULT_THRESHOLD) -> int:
    try:
        m = metrics.RunReport.from_json(Path(measured).read_bytes())
        p = metrics.RunReport.from_json(Path(predicted).read_bytes())
        result = metrics.compare_runs(m, p, threshold)
    except FileNotFoundError as exc:
        _err(f"{exc.filename}: not found")
        return EXIT_USAGE
    except (ValueError, KeyError, TypeError) as exc:
        _err(f"cannot compare: {exc}")
        return EXIT_USAGE
    text = json.dumps(result, sort_keys=True, indent=1) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
    if result["flagged"]:
        print(f"anomaly: {len(result['flagged'])} collectives over {threshold}x, onset iteration "
              f"{result['onset_iter']}", file=sys.stderr)
        return EXIT_ANOMALY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="loomnet", description="Replay training workloads over real or modeled networks.")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("validate", help="check a workload file")
    p.add_argument("file")
    p = sub.add_parser("synth", help="generate a workload from a synthesizer spec")
    p.add_argument("spec")
    p.add_argument("-o", "--output", required=True)
    p = sub.add_parser("run", help="execute a run config")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--rank", type=int)
    p.add_argument("--coordinator")
    p = sub.add_parser("compare", help="compare a measured report against a predicted one")
    p.add_argument("measured")
    p.add_argument("predicted")
    p.add_argument("-o", "--output")
    p.add_argument("--threshold", type=float, default=metrics.DEFAULT_THRESHOLD)
    return ap


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command == "validate":
        return cmd_validate(args.file)
    if args.command == "synth":
        return cmd_synth(args.spec, args.output)
    if args.command == "run":
        return cmd_run(args.config, args.rank, args.coordinator)
    return cmd_compare(args.measured, args.predicted, args.output, args.threshold)
