import csv
import math

import numpy as np
import pytest

from geoflow.cli import RunConfig, UsageError, build_config, main, read_config, _parser
from geoflow.mesh import make_icosphere, make_torus, read_obj, write_obj


def _energies(path):
    with open(path) as fh:
        return [float(r["energy"]) for r in csv.DictReader(fh)]


def _run(tmp_path, *extra):
    return main(["run", "--out", str(tmp_path), "--surface", "icosphere", "--set", "subdivisions=2", *extra])


def test_short_sphere_run(tmp_path, capsys):
    code = _run(tmp_path, "--density", "willmore", "--tau", "1e-3", "--t-end", "0.006", "--frame-stride", "4")
    assert code == 0
    e = _energies(tmp_path / "energy.csv")
    assert len(e) == 7
    assert all(b <= a + 1e-9 * abs(a) for a, b in zip(e, e[1:]))
    # stride frames plus the last state
    assert sorted(p.name for p in tmp_path.glob("frame_*.obj")) == [
        "frame_000000.obj", "frame_000004.obj", "frame_000006.obj"
    ]
    assert read_obj(tmp_path / "frame_000006.obj").n_vertices == 162
    summary = dict(line.split(": ", 1) for line in (tmp_path / "summary.txt").read_text().splitlines())
    assert summary["status"] == "completed"
    assert summary["total_steps"] == "6"
    assert float(summary["final_energy"]) == pytest.approx(e[-1], rel=1e-11)
    assert int(summary["max_newton_iters"]) >= 1
    assert "energy=" in capsys.readouterr().out


def test_energy_csv_header(tmp_path):
    assert _run(tmp_path, "--tau", "1e-3", "--t-end", "0.001") == 0
    first = (tmp_path / "energy.csv").read_text().splitlines()[0]
    assert first == "step,time,energy,area,volume,v_l2,beta_max,alpha,newton_iters"


def test_runs_are_bit_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    for d in (a, b):
        assert _run(d, "--density", "quartic", "--tau", "5e-4", "--t-end", "0.003") == 0
    assert (a / "energy.csv").read_bytes() == (b / "energy.csv").read_bytes()
    assert (a / "frame_000006.obj").read_bytes() == (b / "frame_000006.obj").read_bytes()


def test_missing_output_dir_is_usage_error(tmp_path, capsys):
    target = tmp_path / "nope"
    assert _run(target, "--t-end", "0.001") == 2
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []
    assert "does not exist" in capsys.readouterr().err


def test_unknown_surface_is_usage_error(tmp_path):
    assert main(["run", "--out", str(tmp_path), "--surface", "klein"]) == 2
    assert main(["converge", "--out", str(tmp_path), "--surface", "klein"]) == 2
    assert list(tmp_path.iterdir()) == []


@pytest.mark.parametrize("bad", ["tau=-1", "alpha_factor=1", "newton_tol=0", "colour=red", "subdivisions=two"])
def test_bad_settings_are_usage_errors(tmp_path, bad):
    assert main(["run", "--out", str(tmp_path), "--set", bad]) == 2


def test_unknown_density_is_usage_error(tmp_path):
    assert main(["run", "--out", str(tmp_path), "--density", "cubic"]) == 2


def test_collapse_leaves_partial_outputs(tmp_path, capsys):
    code = main(
        ["run", "--out", str(tmp_path), "--surface", "torus", "--density", "area", "--tau", "10", "--t-end", "20",
         "--set", "n_major=16", "--set", "n_minor=8", "--set", "R=1.4142135623730951", "--set", "r=0.7071067811865476"]
    )
    assert code == 1
    assert "run failed" in capsys.readouterr().err
    assert len(_energies(tmp_path / "energy.csv")) == 1
    assert (tmp_path / "frame_000000.obj").exists()
    text = (tmp_path / "summary.txt").read_text()
    assert "status: failed" in text and "message:" in text


def test_config_file_and_flag_precedence(tmp_path):
    cfg_path = tmp_path / "exp.cfg"
    cfg_path.write_text("# ellipsoid run\nsurface = ellipsoid\na = 2\nb = 1   # axis\ntau = 5e-4\ndensity = quartic\n")
    args = _parser().parse_args(["run", "--config", str(cfg_path), "--density", "willmore", "--set", "subdivisions=1"])
    cfg = build_config(args)
    assert (cfg.surface, cfg.a, cfg.b, cfg.tau, cfg.subdivisions) == ("ellipsoid", 2.0, 1.0, 5e-4, 1)
    assert cfg.density == "willmore"
    assert cfg.free_tau


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("surface ellipsoid\n")
    with pytest.raises(UsageError, match="bad.cfg:1"):
        read_config(bad)
    with pytest.raises(UsageError):
        read_config(tmp_path / "missing.cfg")


def test_config_tuples():
    cfg = build_config(_parser().parse_args(["converge", "--set", "levels=1,2,3", "--set", "checkpoints=0.05 0.1"]))
    assert cfg.levels == (1, 2, 3) and cfg.checkpoints == (0.05, 0.1)
    assert not cfg.free_tau


def test_torus_levels_double_resolution():
    cfg = RunConfig(surface="torus", n_major=8, n_minor=4)
    assert cfg.build_mesh(1).n_vertices == 16 * 8
    assert cfg.build_mesh(2).n_vertices == 32 * 16


def test_converge_rejects_tau_override(tmp_path, capsys):
    args = ["converge", "--out", str(tmp_path), "--tau", "1e-3", "--set", "levels=0,1,2", "--set", "reference_level=3"]
    assert main(args) == 1
    assert "protocol violation" in capsys.readouterr().err
    assert list(tmp_path.iterdir()) == []


def test_converge_needs_three_levels(tmp_path):
    assert main(["converge", "--out", str(tmp_path), "--set", "levels=1,2"]) == 2


def test_converge_small_study(tmp_path, capsys):
    args = [
        "converge", "--out", str(tmp_path), "--surface", "icosphere", "--set", "levels=0,1,2",
        "--set", "reference_level=3", "--set", "checkpoints=0.002,0.004", "--set", "resolution=64",
    ]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert out.count("fitted order") == 2
    rows = list(csv.DictReader(open(tmp_path / "convergence.csv")))
    assert len(rows) == 6
    for r in rows:
        assert float(r["tau"]) <= float(r["h"]) ** 2 / 180 * (1 + 1e-12)


def test_converge_free_tau_allowed(tmp_path):
    args = [
        "converge", "--out", str(tmp_path), "--tau", "1e-3", "--allow-free-tau", "--set", "levels=0,1,2",
        "--set", "reference_level=3", "--set", "checkpoints=0.002", "--set", "resolution=64",
    ]
    assert main(args) == 0
    rows = list(csv.DictReader(open(tmp_path / "convergence.csv")))
    assert {float(r["tau"]) for r in rows} == {1e-3}


def test_validate_generated_torus(tmp_path, capsys):
    path = tmp_path / "torus.obj"
    write_obj(make_torus(math.sqrt(2), 1.0, 16, 8), path)
    assert main(["validate", str(path)]) == 0
    assert "genus: 1" in capsys.readouterr().out.splitlines()


def test_validate_boundary_edge(tmp_path):
    m = make_icosphere(1)
    path = tmp_path / "open.obj"
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in m.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in m.triangles[1:]]
    path.write_text("\n".join(lines) + "\n")
    assert main(["validate", str(path)]) == 1


def test_validate_quad_face(tmp_path, capsys):
    path = tmp_path / "quad.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    assert main(["validate", str(path)]) == 1
    assert "line 5" in capsys.readouterr().err


def test_validate_missing_file(tmp_path):
    assert main(["validate", str(tmp_path / "none.obj")]) == 2


def test_thread_cap(tmp_path, monkeypatch):
    monkeypatch.setenv("GEOFLOW_THREADS", "1")
    assert _run(tmp_path, "--t-end", "0.001") == 0
    monkeypatch.setenv("GEOFLOW_THREADS", "zero")
    assert _run(tmp_path, "--t-end", "0.001") == 2


def test_obj_surface_run(tmp_path):
    src = tmp_path / "in.obj"
    write_obj(make_icosphere(1, 1.2), src)
    out = tmp_path / "o"
    out.mkdir()
    code = main(["run", "--out", str(out), "--surface", "obj", "--set", f"mesh={src}", "--t-end", "0.002"])
    assert code == 0
    assert np.isfinite(_energies(out / "energy.csv")).all()


def test_obj_surface_needs_path(tmp_path):
    assert main(["run", "--out", str(tmp_path), "--surface", "obj"]) == 2
