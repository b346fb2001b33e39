from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest

from loomnet.cli import EXIT_ANOMALY, EXIT_OK, EXIT_USAGE, OUTPUT_FILES, main
from loomnet.metrics import RunReport
from loomnet.workload import load_workload, validate

DP_SPEC = {"kind": "data_parallel", "num_ranks": 4, "num_layers": 2, "fwd_us": 100, "bwd_us": 200,
           "grad_bytes": 1 << 20, "iterations": 3}


def write(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc))
    return path


def cyclic_doc():
    nodes = [{"id": 0, "rank": 0, "kind": "COMPUTE", "duration_us": 1, "deps": [1]},
             {"id": 1, "rank": 0, "kind": "COMPUTE", "duration_us": 1, "deps": [0]}]
    return {"version": 1, "num_ranks": 1, "groups": [], "nodes": {"0": nodes}}


@pytest.fixture
def workload(tmp_path):
    spec = write(tmp_path / "spec.json", DP_SPEC)
    assert main(["synth", str(spec), "-o", str(tmp_path / "wl.json")]) == EXIT_OK
    return tmp_path / "wl.json"


# -- validate ------------------------------------------------------------------------------


def test_validate_valid(workload, capsys):
    assert main(["validate", str(workload)]) == EXIT_OK
    assert "ok: 4 ranks" in capsys.readouterr().out


def test_validate_cycle(tmp_path, capsys):
    assert main(["validate", str(write(tmp_path / "c.json", cyclic_doc()))]) != EXIT_OK
    assert "cycle" in capsys.readouterr().out


def test_validate_missing(tmp_path, capsys):
    assert main(["validate", str(tmp_path / "nope.json")]) != EXIT_OK
    assert "not found" in capsys.readouterr().err


# -- synth ---------------------------------------------------------------------------------


def test_synth_output_is_valid(workload):
    assert validate(load_workload(workload)) == []


def test_synth_pipeline_single_rank(tmp_path):
    spec = write(tmp_path / "p.json", {"kind": "pipeline", "num_ranks": 1, "microbatches": 2, "stage_us": 5,
                                       "act_bytes": 10})
    assert main(["synth", str(spec), "-o", str(tmp_path / "w.json")]) == EXIT_USAGE
    assert not (tmp_path / "w.json").exists()


def test_synth_zero_grad_bytes(tmp_path):
    spec = write(tmp_path / "s.json", dict(DP_SPEC, grad_bytes=0))
    assert main(["synth", str(spec), "-o", str(tmp_path / "w.json")]) == EXIT_OK
    assert main(["validate", str(tmp_path / "w.json")]) == EXIT_OK


def test_synth_unknown_kind(tmp_path):
    spec = write(tmp_path / "s.json", {"kind": "mixture"})
    assert main(["synth", str(spec), "-o", str(tmp_path / "w.json")]) == EXIT_USAGE


# -- run -------------------------------------------------------------------------------------


def run_config(tmp_path, name="cfg.json", **fields):
    doc = {"workload": "wl.json", "mode": "VIRTUAL", "transport": "SIM", "seed": 5, "output_dir": "out"}
    doc.update(fields)
    return write(tmp_path / name, doc)


def test_virtual_run_writes_outputs(workload, tmp_path):
    assert main(["run", "-c", str(run_config(tmp_path))]) == EXIT_OK
    out = tmp_path / "out"
    assert sorted(p.name for p in out.iterdir()) == sorted(OUTPUT_FILES.values())
    rep = RunReport.from_json((out / "report.json").read_bytes())
    assert rep.mode == "VIRTUAL" and len(rep.iterations) == 3 and len(rep.collectives) == 6


def test_virtual_run_is_deterministic(workload, tmp_path):
    cfg = run_config(tmp_path)
    reports = []
    for _ in range(2):
        assert main(["run", "-c", str(cfg)]) == EXIT_OK
        reports.append((tmp_path / "out/report.json").read_bytes())
        (tmp_path / "out/report.json").unlink()
    assert reports[0] == reports[1]


def test_config_echo_reruns_identically(workload, tmp_path):
    assert main(["run", "-c", str(run_config(tmp_path))]) == EXIT_OK
    first = (tmp_path / "out/report.json").read_bytes()
    echo = json.loads(first)["config"]
    write(tmp_path / "echo.json", echo)
    (tmp_path / "out/report.json").unlink()
    assert main(["run", "-c", str(tmp_path / "echo.json")]) == EXIT_OK
    assert (tmp_path / "out/report.json").read_bytes() == first


def test_inline_synth_spec_with_iterations_override(tmp_path):
    cfg = run_config(tmp_path, workload=DP_SPEC, iterations=2)
    assert main(["run", "-c", str(cfg)]) == EXIT_OK
    assert len(RunReport.from_json((tmp_path / "out/report.json").read_bytes()).iterations) == 2


def test_real_missing_host_is_config_error(workload, tmp_path, capsys):
    cfg = run_config(tmp_path, mode="REAL", transport="SOCKET", hosts=["127.0.0.1:0"] * 3)
    assert main(["run", "-c", str(cfg)]) == EXIT_USAGE
    assert "hosts" in capsys.readouterr().err


@pytest.mark.parametrize("fields, needle", [
    ({"typo_field": 1}, "unknown config field"),
    ({"mode": "VIRTUAL", "transport": "SOCKET"}, "VIRTUAL mode"),
    ({"topology": "missing.json"}, "not found"),
    ({"collective_algorithm": {"ALLREDUCE": "BUTTERFLY"}}, "not available"),
])
def test_config_errors(workload, tmp_path, capsys, fields, needle):
    assert main(["run", "-c", str(run_config(tmp_path, **fields))]) == EXIT_USAGE
    assert needle in capsys.readouterr().err


def test_real_run_local_launcher(workload, tmp_path):
    cfg = run_config(tmp_path, mode="REAL", transport="SOCKET", hosts=["127.0.0.1:0"] * 4)
    proc = subprocess.run([sys.executable, "-m", "loomnet", "run", "-c", str(cfg)], capture_output=True,
                          text=True, timeout=120)
    assert proc.returncode == EXIT_OK, proc.stderr
    rep = RunReport.from_json((tmp_path / "out/report.json").read_bytes())
    assert rep.mode == "REAL" and len(rep.records) == sum(1 for _ in load_workload(workload).all_nodes())


# -- compare -------------------------------------------------------------------------------


@pytest.fixture
def report(workload, tmp_path):
    assert main(["run", "-c", str(run_config(tmp_path))]) == EXIT_OK
    return tmp_path / "out/report.json"


def test_compare_identical(report, tmp_path):
    assert main(["compare", str(report), str(report), "-o", str(tmp_path / "d.json")]) == EXIT_OK
    assert json.loads((tmp_path / "d.json").read_text())["flagged"] == []


def test_compare_doctored(report, tmp_path):
    doc = json.loads(report.read_text())
    for c in doc["collectives"]:
        if c["iter"] >= 1:
            c["duration_us"] *= 2
    doctored = write(tmp_path / "doctored.json", doc)
    assert main(["compare", str(doctored), str(report), "-o", str(tmp_path / "d.json")]) == EXIT_ANOMALY
    assert json.loads((tmp_path / "d.json").read_text())["onset_iter"] == 1


def test_compare_mismatched(report, tmp_path, capsys):
    doc = json.loads(report.read_text())
    doc["collectives"] = doc["collectives"][:-1]
    other = write(tmp_path / "other.json", doc)
    assert main(["compare", str(other), str(report)]) == EXIT_USAGE
    assert "cannot compare" in capsys.readouterr().err


def test_compare_missing_file(report, tmp_path):
    assert main(["compare", str(tmp_path / "nope.json"), str(report)]) == EXIT_USAGE


def test_usage_error_exit_code():
    assert main(["frobnicate"]) == EXIT_USAGE
