import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lorenz_atlas import cli
from lorenz_atlas.cli import (EXIT_CONFIG, EXIT_OK, EXIT_VALIDATION, RunConfig, export_mesh, load_atlas, load_config,
                              main, parse_config, run, save_atlas, serialize_config, verify_atlas)
from lorenz_atlas.continuation import Atlas, StepPolicy, globalize
from lorenz_atlas.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = """
[manifold]
equilibrium = origin
stability = stable
order = 20
scalings = 5, 0.5
[integrator]
N = 10
M = 14
[run]
horizon = -0.03
checkpoints = 0, -0.01, -0.03
"""


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    path = tmp_path_factory.mktemp("atlas") / "small.jsonl"
    res = run(parse_config(SMALL), out=path)
    return path, res


configs = st.builds(
    RunConfig,
    equilibrium=st.sampled_from(["origin", "p+", "p-"]),
    order=st.integers(1, 200),
    scalings=st.none() | st.tuples(st.floats(1e-3, 50), st.floats(1e-3, 50)),
    mesh=st.sampled_from(["square-8", "polygon-3", "polygon-20"]),
    N=st.integers(1, 60),
    M=st.none() | st.integers(1, 90),
    eps=st.floats(0.1, 4.0),
    horizon=st.floats(-30.0, 0.0),
    target_error=st.none() | st.floats(1e-16, 1e-3),
    clip=st.none() | st.tuples(*[st.just(v) for v in (-1.0, 1.0, -2.5, 3.0, 0.0, 1e300)]),
    checkpoints=st.lists(st.floats(0.0, 1.0), max_size=4).map(tuple),
    table=st.none() | st.just("table.txt"),
)


@given(configs)
def test_config_round_trip(cfg):
    cfg = dataclasses.replace(cfg, checkpoints=tuple(c * cfg.horizon for c in cfg.checkpoints)).validate()
    assert parse_config(serialize_config(cfg)) == cfg


@pytest.mark.parametrize("name", ["lorenz-stable-origin.ini", "lorenz-unstable-pplus.ini"])
def test_golden_configs_parse(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.orders() == (39, 24)
    assert cfg.policy().target_error is not None


@pytest.mark.parametrize("text", [
    "[manifold]\nstability = stable\n[run]\nhorizon = 1.0\n",
    "[manifold]\nstability = unstable\n[run]\nhorizon = -1.0\n",
    "[manifold]\nequilibrium = q\n",
    "[boundary]\nmesh = polygon-2\n",
    "[integrator]\nN = zero\n",
    "[nope]\nkey = 1\n",
    "[clip]\nx = 1, 0\ny = 0, 1\nz = 0, 1\n",
    "[run]\nhorizon = -1\ncheckpoints = -2\n",
])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_orders_from_effort():
    M, N = RunConfig(N=None, effort=1777, eps=0.6).orders()
    assert abs(M * N - 1777) <= M + N
    assert M / N == pytest.approx(0.6, rel=0.05)
    assert RunConfig(N=24).orders()[1] == 24


def test_exit_codes(tmp_path, small_run, capsys):
    path, _ = small_run
    assert main(["run", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    assert main(["run", "--horizon", "1", "--stability", "stable"]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == EXIT_CONFIG
    assert main(["verify", str(tmp_path / "none.jsonl")]) == EXIT_CONFIG
    assert main(["verify", str(path)]) == EXIT_OK
    bad = tmp_path / "bad.jsonl"
    bad.write_text("not json\n")
    assert main(["table", str(bad)]) == EXIT_CONFIG
    capsys.readouterr()


def test_print_config_round_trips(tmp_path, capsys):
    assert main(["run", "--print-config", "--equilibrium", "p+", "--stability", "unstable",
                 "--horizon", "2", "--clip-z=-1,50"]) == EXIT_OK
    cfg = parse_config(capsys.readouterr().out)
    assert cfg.equilibrium == "p+" and cfg.horizon == 2.0
    assert cfg.clip[4:] == (-1.0, 50.0)


def test_wrong_eigen_count_is_a_config_error(tmp_path, capsys):
    # p+ has only one stable direction; the message must not promise a partial atlas
    code = main(["run", "--equilibrium", "p+", "--stability", "stable", "--horizon", "-0.1",
                 "--out", str(tmp_path / "a.jsonl")])
    assert code == EXIT_CONFIG
    assert "partial" not in capsys.readouterr().err


def test_certification_failure_exit_code(tmp_path, capsys):
    # one chart allowed: globalization must stop and report a validation failure
    code = main(["run", "--order", "20", "--scalings", "5,0.5", "--N", "10", "--M", "14", "--horizon", "-0.05", "--max-charts", "1",
                 "--out", str(tmp_path / "a.jsonl")])
    assert code == EXIT_VALIDATION
    capsys.readouterr()


def test_atlas_round_trip_bit_exact(tmp_path, small_run):
    path, res = small_run
    af = load_atlas(path)
    assert af.atlas.chart_count == res.atlas.chart_count
    for a, b in zip(res.atlas.charts, af.atlas.charts):
        assert a.coeffs.tobytes() == b.coeffs.tobytes()
        assert (a.r, a.L, a.t0, a.s_range, a.parent_id, a.root) == (b.r, b.L, b.t0, b.s_range, b.parent_id, b.root)
    for g, h in zip(res.atlas.initial_arcs, af.atlas.initial_arcs):
        assert g.tobytes() == h.tobytes()
    assert np.array_equal(af.local.coeffs.mid, res.local.coeffs.mid)
    assert af.local.error == res.local.error
    assert af.summary["max_error"] == res.atlas.max_error()
    again = save_atlas(tmp_path / "again.jsonl", af.atlas, af.local, af.config)
    assert (tmp_path / "again.jsonl").read_text().splitlines()[1:] == Path(path).read_text().splitlines()[1:]
    assert again.summary["charts"] == af.summary["charts"]


def test_unknown_parent_is_rejected(tmp_path, small_run):
    path, _ = small_run
    lines = Path(path).read_text().splitlines()
    out = []
    for line in lines:
        rec = json.loads(line)
        if rec["type"] == "chart" and rec["parent"] is not None:
            rec["parent"] = 10 ** 6
        out.append(json.dumps(rec))
    bad = tmp_path / "orphan.jsonl"
    bad.write_text("\n".join(out) + "\n")
    with pytest.raises(OSError):
        load_atlas(bad)


def test_zero_horizon_atlas(tmp_path):
    cfg = parse_config(SMALL.replace("horizon = -0.03", "horizon = 0").replace("checkpoints = 0, -0.01, -0.03", ""))
    path = tmp_path / "t0.jsonl"
    res = run(cfg, out=path)
    af = load_atlas(path)
    assert af.atlas.chart_count == 0 and af.local is not None
    assert af.atlas.max_error() == res.local.error
    st_ = export_mesh(af, 3, tmp_path / "t0.obj")
    assert (st_.objects, st_.vertices, st_.faces) == (1, 9, 8)


def _mesh_lines(path):
    return Path(path).read_text().splitlines()


def test_single_affine_chart_mesh(tmp_path, gamma_b, params):
    atlas = globalize([(gamma_b, 0.0)], 1e-6, StepPolicy(N=2, M=4), params=params)
    assert atlas.chart_count == 1
    af = save_atlas(tmp_path / "one.jsonl", atlas)
    st_ = export_mesh(af, 2, tmp_path / "one.obj")
    assert (st_.objects, st_.vertices, st_.faces) == (1, 4, 2)
    lines = _mesh_lines(tmp_path / "one.obj")
    assert lines[0] == "# lorenz-atlas-mesh 1"
    assert lines[1] == "# objects 1 vertices 4 faces 2"
    assert [l for l in lines if l.startswith("f")] == ["f 1 2 4", "f 1 4 3"]
    v = np.array([[float(x) for x in l.split()[1:]] for l in lines if l.startswith("v")])
    np.testing.assert_allclose(v[0], [0.0, 0.0, 27.0] - np.array([np.sqrt(72), np.sqrt(72), 0.0]), atol=1e-12)


def test_equilibrium_mesh_is_degenerate(tmp_path, params):
    g = np.zeros((3, 3))
    g[2, 0] = 0.0
    atlas = globalize([(g, 0.0)], 0.01, StepPolicy(N=2, M=4), params=params)
    af = save_atlas(tmp_path / "eq.jsonl", atlas)
    st_ = export_mesh(af, 4, tmp_path / "eq.obj")
    assert st_.faces == 0 and len(st_.degenerate) == atlas.chart_count
    assert "# degenerate" in _mesh_lines(tmp_path / "eq.obj")


def test_mesh_counts(tmp_path, small_run):
    path, _ = small_run
    af = load_atlas(path)
    d = 5
    st_ = export_mesh(af, d, tmp_path / "m.obj")
    n = af.atlas.chart_count + 1
    assert st_.vertices == n * d * d
    assert st_.faces == n * 2 * (d - 1) ** 2
    lines = _mesh_lines(tmp_path / "m.obj")
    assert sum(l.startswith("v ") for l in lines) == st_.vertices
    faces = np.array([[int(x) for x in l.split()[1:]] for l in lines if l.startswith("f ")])
    assert faces.min() == 1 and faces.max() == st_.vertices
    assert main(["export-mesh", str(path), "--density", "1", "--out", str(tmp_path / "x.obj")]) == EXIT_CONFIG


def test_verify_detects_shrunk_errors(tmp_path, small_run):
    path, _ = small_run
    af = load_atlas(path)
    assert verify_atlas(af, samples=60).passed
    for c in af.atlas.charts:
        c.r = 0.0
        c.coeffs[:, 0, 0] += 1e-6
    rep = verify_atlas(af, samples=60)
    assert not rep.passed and rep.max_excess > 1e-7


def test_table_and_bands(tmp_path, small_run, capsys):
    path, res = small_run
    good = tmp_path / "good.ini"
    good.write_text(f"[end]\ntau = -0.01\nmax_error = 1e-9\ncharts = 1, {res.atlas.chart_count}\n")
    bad = tmp_path / "bad.ini"
    bad.write_text("[end]\ntau = -0.01\nmax_error = 1e-30\ncharts = 1, 10000\n")
    assert main(["table", str(path), "--expected", str(good)]) == EXIT_OK
    assert main(["table", str(path), "--expected", str(bad)]) == EXIT_VALIDATION
    floor = tmp_path / "floor.ini"
    floor.write_text("[end]\ntau = -0.03\nmin_error = 1e-3\nmax_error = 1e-2\ncharts = 1, 10000\n")
    assert main(["table", str(path), "--expected", str(floor)]) == EXIT_VALIDATION
    empty = tmp_path / "empty.ini"
    empty.write_text("[end]\ntau = -0.03\nmin_error = 1e-2\nmax_error = 1e-3\ncharts = 1, 10000\n")
    assert main(["table", str(path), "--expected", str(empty)]) == EXIT_CONFIG
    assert main(["table", str(path), "--checkpoints", "0,-0.03"]) == EXIT_OK
    assert main(["table", str(path), "--checkpoints", "1"]) == EXIT_CONFIG
    out = capsys.readouterr().out
    assert "FAIL [end]" in out and "pass [end]" in out


def test_thread_env_var_reaches_run(monkeypatch, tmp_path):
    monkeypatch.setenv("LORENZ_ATLAS_THREADS", "0")
    assert main(["run", "--order", "12", "--scalings", "1,0.1", "--N", "6", "--M", "8", "--horizon", "-0.002",
                 "--out", str(tmp_path / "a.jsonl")]) == EXIT_CONFIG
    monkeypatch.setenv("LORENZ_ATLAS_THREADS", "2")
    assert main(["run", "--order", "12", "--scalings", "1,0.1", "--N", "6", "--M", "8", "--horizon", "-0.002",
                 "--out", str(tmp_path / "a.jsonl")]) == EXIT_OK
