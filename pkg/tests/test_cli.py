import csv
import json

import numpy as np
import pytest

from nsscale import cli
from nsscale.fields import make_grid, random_divfree_field
from nsscale.io import write_vector_field
from nsscale.norms import REPORT_HEADER

HEADER = list(REPORT_HEADER) + list(cli.EXTRA_COLUMNS)


def write_config(path, **overrides):
    cfg = {
        "grid": {"dim": 2, "n": 16},
        "solver": {"viscosity": 1.0, "dt": 0.001, "t_end": 0.05, "snapshot_stride": 5},
        "initial": {"kind": "taylor_green", "amplitude": 1.0},
        "analysis": [{"task": "energy_budget"}],
        "output_dir": "out",
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_taylor_green_run(tmp_path):
    code, manifest = cli.run(write_config(tmp_path / "c.json"))
    assert code == cli.EXIT_OK
    assert manifest["status"] == "complete"
    assert "energy_budget.csv" in manifest["outputs"]
    out = tmp_path / "out"
    for name in manifest["outputs"]:
        assert (out / name).exists()
    rows = read_csv(out / "energy_budget.csv")
    assert rows[0] == HEADER
    assert json.loads((out / "manifest.json").read_text())["status"] == "complete"


def test_unknown_key_rejected(tmp_path, capsys):
    path = write_config(tmp_path / "c.json", colour="blue")
    code, manifest = cli.run(path)
    assert code == cli.EXIT_CONFIG and manifest is None
    assert not (tmp_path / "out").exists()
    assert "config error" in capsys.readouterr().err


@pytest.mark.parametrize(
    "overrides",
    [
        {"solver": {"dt": 0.003, "t_end": 0.01}},
        {"grid": {"dim": 4}},
        {"initial": {"kind": "vortex"}},
        {"analysis": [{"task": "theorem1", "bogus": 1}]},
        {"solver": {"viscosity": -1.0}},
    ],
)
def test_invalid_configs(tmp_path, overrides):
    assert cli.run(write_config(tmp_path / "c.json", **overrides))[0] == cli.EXIT_CONFIG


def test_unreadable_config(tmp_path):
    bad = tmp_path / "c.json"
    bad.write_text("{not json")
    assert cli.run(bad)[0] == cli.EXIT_CONFIG
    assert cli.run(tmp_path / "missing.json")[0] == cli.EXIT_CONFIG


def test_determinism(tmp_path):
    analysis = [
        {"task": "energy_budget"},
        {"task": "pivot_budget", "s": [0.25]},
        {"task": "theorem1", "n": 2, "p": 1.2, "region": {"t0": 0.01}},
    ]
    init = {"kind": "random", "energy": 2.0, "seed": 4}
    outs = []
    for k in range(2):
        path = write_config(tmp_path / f"c{k}.json", initial=init, analysis=analysis, output_dir=f"out{k}")
        code, manifest = cli.run(path)
        assert code == cli.EXIT_OK
        outs.append(tmp_path / f"out{k}")
    for name in ("energy_budget.csv", "pivot_budget.csv", "theorem1.csv", "report.csv", "report.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_empty_analysis_gives_header_only_report(tmp_path):
    code, manifest = cli.run(write_config(tmp_path / "c.json", analysis=[]))
    assert code == cli.EXIT_OK
    assert read_csv(tmp_path / "out" / "report.csv") == [HEADER]
    assert json.loads((tmp_path / "out" / "report.json").read_text())["rows"] == []


def test_report_mirrors_agree(tmp_path):
    analysis = [
        {"task": "scaling_fit", "quantity": "dissipation", "epsilons": [1.0, 0.5, 0.25]},
        {"task": "theorem1"},
        {"task": "theorem1", "n": 2, "p": 1.3333333333333333},
    ]
    code, manifest = cli.run(write_config(tmp_path / "c.json", analysis=analysis))
    assert code == cli.EXIT_OK
    out = tmp_path / "out"
    rows = read_csv(out / "report.csv")
    mirror = json.loads((out / "report.json").read_text())
    assert mirror["columns"] == HEADER == rows[0]
    assert [[r[c] for c in HEADER] for r in mirror["rows"]] == rows[1:]
    quantities = [r[0] for r in rows[1:]]
    assert "slope" in quantities and "r2" in quantities
    # repeated task kinds get distinct names
    assert {e["name"] for e in manifest["tasks"]} == {"scaling_fit", "theorem1", "theorem1_2"}
    boundary = [r for r in mirror["rows"] if r["task"] == "theorem1_2" and r["quantity"] == "theorem1_ratio"]
    assert boundary[0]["admissible"] == "false"
    # 17 significant digits round-trip every real
    slope = next(r for r in mirror["rows"] if r["quantity"] == "slope")["value"]
    # dissipation is scale invariant in two dimensions
    assert float(slope) == pytest.approx(0.0, abs=1e-8)
    assert repr(float(slope)) == repr(float("%.17g" % float(slope)))


def test_report_command_rebuilds(tmp_path):
    cli.run(write_config(tmp_path / "c.json"))
    out = tmp_path / "out"
    before = (out / "report.csv").read_bytes()
    (out / "report.csv").unlink()
    assert cli.main(["report", str(out / "manifest.json")]) == cli.EXIT_OK
    assert (out / "report.csv").read_bytes() == before
    assert cli.main(["report", str(tmp_path / "nope.json")]) == cli.EXIT_CONFIG


def test_failed_task_does_not_abort_others(tmp_path):
    analysis = [
        {"task": "goodset", "epsilon": 0.25, "box": {"t0": 0.0, "t1": 0.05, "n_t": 1, "n_x": 2}},
        {"task": "energy_budget"},
    ]
    code, manifest = cli.run(write_config(tmp_path / "c.json", analysis=analysis))
    assert code == cli.EXIT_TASK_FAILED
    status = {e["task"]: e["status"] for e in manifest["tasks"]}
    assert status == {"goodset": "failed", "energy_budget": "ok"}
    assert "error" in manifest["tasks"][0]
    assert (tmp_path / "out" / "energy_budget.csv").exists()


def test_blow_up_exit_code(tmp_path):
    cfg = write_config(
        tmp_path / "c.json",
        initial={"kind": "random", "energy": 1e6, "seed": 0},
        solver={"viscosity": 1e-3, "dt": 0.1, "t_end": 2.0, "dealias": False},
    )
    code, manifest = cli.run(cfg)
    assert code == cli.EXIT_BLOWUP
    assert manifest["status"] == "blowup" and manifest["last_time"] >= 0


def test_interrupted_run_leaves_incomplete_manifest(tmp_path, monkeypatch):
    def boom(task, traj, label):
        raise KeyboardInterrupt

    monkeypatch.setitem(cli.TASKS, "energy_budget", boom)
    with pytest.raises(KeyboardInterrupt):
        cli.run(write_config(tmp_path / "c.json"))
    assert json.loads((tmp_path / "out" / "manifest.json").read_text())["status"] == "incomplete"


def test_thread_cap(tmp_path, monkeypatch):
    monkeypatch.setenv("NSSCALE_THREADS", "3")
    code, manifest = cli.run(write_config(tmp_path / "c.json", analysis=[]))
    assert code == cli.EXIT_OK and manifest["threads"] == 3
    monkeypatch.setenv("NSSCALE_THREADS", "zero")
    assert cli.run(write_config(tmp_path / "c.json"))[0] == cli.EXIT_CONFIG


def test_save_trajectory(tmp_path):
    code, manifest = cli.run(write_config(tmp_path / "c.json", save_trajectory=True))
    assert code == cli.EXIT_OK
    from nsscale.io import load_trajectory

    traj = load_trajectory(tmp_path / "out" / "trajectory")
    assert len(traj) == 11


def test_validate_echoes_defaults(tmp_path, capsys):
    assert cli.main(["validate", str(write_config(tmp_path / "c.json"))]) == cli.EXIT_OK
    echoed = json.loads(capsys.readouterr().out)
    assert echoed["solver"]["dealias"] is True
    assert echoed["analysis"][0] == {"task": "energy_budget", "rule": "simpson"}
    assert cli.main(["validate", str(write_config(tmp_path / "d.json", extra=1))]) == cli.EXIT_CONFIG


def test_inspect(tmp_path, capsys):
    grid = make_grid(2, 8, 2 * np.pi)
    path = tmp_path / "snap.bin"
    write_vector_field(path, random_divfree_field(grid, seed=1), time=0.5)
    assert cli.main(["inspect", str(path)]) == cli.EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["header"]["time"] == 0.5 and set(info["stats"]) == set(info["header"]["fields"])
    path.write_bytes(path.read_bytes()[:-8])
    assert cli.main(["inspect", str(path)]) == cli.EXIT_CONFIG


def test_frames_task(tmp_path):
    analysis = [
        {
            "task": "frames",
            "epsilon": 0.25,
            "base_points": [[0.3, 1.0, 2.0], [0.3, 3.0, 0.5]],
            "n": [1, 2],
        }
    ]
    cfg = write_config(tmp_path / "c.json", solver={"viscosity": 1.0, "dt": 0.005, "t_end": 0.3, "snapshot_stride": 2}, analysis=analysis)
    code, manifest = cli.run(cfg)
    assert code == cli.EXIT_OK, manifest["tasks"]
    rows = read_csv(tmp_path / "out" / "frames.csv")
    ratios = [float(r[HEADER.index("ratio")]) for r in rows[1:] if r[0] == "derivative_ratio"]
    assert len(ratios) == 4 and np.allclose(ratios, 1.0, rtol=1e-3)
    assert manifest["tasks"][0]["summary"]["frames"] == 2
