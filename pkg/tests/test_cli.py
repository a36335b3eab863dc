import csv
import json

import numpy as np
import pytest

from scancov import shapes
from scancov.cli import EXIT_MISSION, EXIT_OK, EXIT_PLAN, EXIT_USAGE, main
from scancov.geometry import save_mesh
from scancov.path import CoveragePath
from scancov.viewpoints import read_viewpoints_csv

# a 1 m cube inside a closed shell of obstacle plates (the ground closes the bottom)
ENCLOSED = {
    "name": "enclosed",
    "target_mesh": {"shape": "box", "size": [1.0, 1.0, 1.0], "center": [0.0, 0.0, 0.5]},
    "obstacle_meshes": [{"shape": "box", "size": s, "center": c} for s, c in [
        ([3.6, 0.2, 3.2], [0.0, -1.7, 1.6]), ([3.6, 0.2, 3.2], [0.0, 1.7, 1.6]),
        ([0.2, 3.2, 3.2], [-1.7, 0.0, 1.6]), ([0.2, 3.2, 3.2], [1.7, 0.0, 1.6]),
        ([3.6, 3.6, 0.2], [0.0, 0.0, 3.3])]],
    "start": {"x": -4.0, "y": 0.0, "z": 1.2, "pitch": 0.0, "yaw": 0.0},
    "t_max": 40.0,
}


def read_metrics(out):
    with open(out / "metrics.csv") as fh:
        return list(csv.DictReader(fh))


def test_plan_cube(tmp_path, capsys):
    mesh = tmp_path / "cube.obj"
    save_mesh(shapes.box((2.0, 2.0, 2.0), center=(0, 0, 1.0), cell=0.5), str(mesh))
    out = tmp_path / "plan"
    assert main(["plan", str(mesh), "--pose", "-4", "0", "1.2", "0", "0", "--out", str(out)]) == EXIT_OK
    vps = read_viewpoints_csv(str(out / "viewpoints.csv"))
    assert len(vps) > 0
    with open(out / "path.jsonl") as fh:
        path = CoveragePath.from_jsonl(fh)
    on_path = [n.pose for n in path.nodes if n.is_viewpoint]
    # every viewpoint is visited exactly once
    assert len(on_path) == len(vps)
    for vp, _ in vps:
        d = np.abs(np.array(on_path) - vp.pose).max(axis=1)
        assert (d < 1e-4).sum() == 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["viewpoints"] == len(vps) and summary["tour_cost"] > 0
    assert "viewpoints=" in capsys.readouterr().out


def test_plan_missing_file(tmp_path, capsys):
    assert main(["plan", str(tmp_path / "nope.obj"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert "cannot read mesh" in capsys.readouterr().err


def test_plan_zero_faces(tmp_path):
    mesh = tmp_path / "pts.obj"
    mesh.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\n")
    assert main(["plan", str(mesh), "--out", str(tmp_path / "o")]) == EXIT_PLAN


def test_simulate_bad_json(tmp_path, capsys):
    sc = tmp_path / "bad.json"
    sc.write_text("{not json")
    assert main(["simulate", str(sc), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert "bad scenario" in capsys.readouterr().err


def test_simulate_unknown_corpus_name(tmp_path):
    assert main(["simulate", "corpus:nowhere", "--out", str(tmp_path)]) == EXIT_USAGE


def test_bad_flag_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["simulate", "corpus:wall", "--mode", "sideways"])
    assert e.value.code == EXIT_USAGE


def test_simulate_wall(tmp_path):
    out = tmp_path / "wall"
    assert main(["simulate", "corpus:wall", "--predictor", "gt", "--seed", "0", "--out", str(out)]) == EXIT_OK
    (row,) = read_metrics(out)
    assert row["success"] == "1" and float(row["completeness_pct"]) >= 99.0
    assert float(row["min_clearance_m"]) >= 0.3
    lines = (out / "trajectory.jsonl").read_text().splitlines()
    assert len(lines) > 10 and json.loads(lines[-1])["t"] == float(row["flight_time_s"])


def test_simulate_unreachable_times_out(tmp_path):
    sc = tmp_path / "enclosed.json"
    sc.write_text(json.dumps(ENCLOSED))
    out = tmp_path / "enc"
    assert main(["simulate", str(sc), "--out", str(out)]) == EXIT_MISSION
    (row,) = read_metrics(out)
    assert row["fail_cause"] == "timeout" and row["success"] == "0"
    assert float(row["flight_time_s"]) == pytest.approx(40.0)


def test_bench_unknown_suite(tmp_path, capsys):
    assert main(["bench", "nosuch", "--out", str(tmp_path)]) == EXIT_USAGE
    assert "unknown suite" in capsys.readouterr().err


def test_bench_atsp(tmp_path):
    assert main(["bench", "atsp", "--out", str(tmp_path)]) == EXIT_OK
    with open(tmp_path / "atsp.csv") as fh:
        rows = list(csv.DictReader(fh))
    ratios = [float(r["a"]) for r in rows if r["kind"] == "ratio"]
    assert len(ratios) == 100 and max(ratios) <= 1.05
    assert "heuristic/optimal" in (tmp_path / "atsp.txt").read_text()


def test_bench_cfgspace(tmp_path):
    assert main(["bench", "cfgspace", "--out", str(tmp_path)]) == EXIT_OK
    with open(tmp_path / "cfgspace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["method"] for r in rows} == {"parity", "sdf-oracle", "raycast-all"}
    for r in rows:
        if r["method"] == "parity":
            assert float(r["feasibility_pct"]) == 100.0, r["mesh"]
