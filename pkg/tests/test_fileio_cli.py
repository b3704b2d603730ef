import csv
import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from tetel.cli import main
from tetel.fdr import fdr_adjust
from tetel.fileio import (
    DataFormatError,
    RunConfig,
    format_matrix,
    load_field_csv,
    load_long_csv,
    parse_matrix,
    write_field_csv,
    write_pgm,
)
from tetel.sim import gen_study1, gen_study3


def write(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8")
    return path


LONG = """subject_id,time,y,x1,x2
a,3,1.5,1,0.3
a,1,0.5,1,0.1
b,1,2.0,1,-0.2
a,2,1.0,1,0.2
b,2,2.5,1,-0.1
b,3,3.5,1,0.0
"""


def test_load_long_csv_groups_and_sorts(tmp_path):
    d = load_long_csv(write(tmp_path / "d.csv", LONG))
    assert d.n == 2 and d.q == 2 and d.max_m == 3
    assert_array_equal(d.t[0], [1, 2, 3])
    assert_array_equal(d.y[0], [0.5, 1.0, 1.5])
    assert_array_equal(d.X[1, :, 1], [-0.2, -0.1, 0.0])


def test_no_implicit_intercept(tmp_path):
    text = "subject_id,time,y,x1\ns,1,1.0,0.5\ns,2,2.0,0.7\n"
    assert load_long_csv(write(tmp_path / "d.csv", text)).q == 1


@pytest.mark.parametrize("text,needle", [
    ("subject_id,time,y,x1\na,1,1,1\na,1,2,1\n", "line 3"),
    ("subject_id,time,x1\na,1,1\n", "missing columns y"),
    ("subject_id,time,y\na,1,1\n", "x1..xq"),
    ("subject_id,time,y,x1\na,1,abc,1\n", "line 2"),
    ("subject_id,time,y,x1\na,1,1\n", "line 2"),
])
def test_load_long_csv_errors(tmp_path, text, needle):
    with pytest.raises(DataFormatError, match=needle):
        load_long_csv(write(tmp_path / "d.csv", text))


def test_field_round_trip_is_byte_exact(tmp_path):
    f = gen_study3(6, 0.2, lattice=(3, 4), rois=((0, 0, 1, 1),), seed=8)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_field_csv(f, a)
    g = load_field_csv(a)
    write_field_csv(g, b)
    assert a.read_bytes() == b.read_bytes()
    assert g.lattice.dims == (3, 4) and g.shared_covariates
    assert_array_equal(g.y, f.y)
    assert_array_equal(g.X, f.X)


def test_single_voxel_field(tmp_path):
    text = "voxel_row,voxel_col,subject_id,time,y,x1\n" + "".join(
        f"2,7,s{i},{j},{i + j}.5,1\n" for i in range(3) for j in (1, 2))
    f = load_field_csv(write(tmp_path / "f.csv", text))
    assert f.lattice.dims == (1, 1) and f.n == 3


def test_field_errors(tmp_path):
    head = "voxel_row,voxel_col,subject_id,time,y,x1\n"
    ragged = head + "0,0,a,1,1,1\n0,0,b,1,1,1\n0,1,a,1,1,1\n"
    with pytest.raises(DataFormatError, match="subject set"):
        load_field_csv(write(tmp_path / "r.csv", ragged))
    holes = head + "0,0,a,1,1,1\n1,1,a,1,1,1\n"
    with pytest.raises(DataFormatError, match=r"missing voxels \[\(0, 1\), \(1, 0\)\]"):
        load_field_csv(write(tmp_path / "h.csv", holes))
    times = head + "0,0,a,1,1,1\n0,1,a,2,1,1\n"
    with pytest.raises(DataFormatError, match="observation times"):
        load_field_csv(write(tmp_path / "t.csv", times))


def test_matrix_syntax():
    assert parse_matrix("0,0,0,1;0,0,1,0") == ((0, 0, 0, 1), (0, 0, 1, 0))
    assert parse_matrix(format_matrix([[1.5, -2.0]])) == ((1.5, -2.0),)
    with pytest.raises(ValueError):
        parse_matrix("1,2;3")


@settings(max_examples=60, deadline=None)
@given(
    sub=st.sampled_from(["fit", "test", "tetel", "simulate", "fdr"]),
    alpha=st.floats(1e-4, 0.5),
    fdr=st.sampled_from(["BH", "BY"]),
    R=st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=4),
    n=st.integers(2, 10_000),
    beta=st.tuples(*[st.floats(-3, 3, allow_nan=False)] * 3),
    threads=st.integers(1, 16),
    adjusted=st.booleans(),
    stats=st.lists(st.sampled_from(["LR_Aetel", "LR_Etel", "Wald"]), max_size=3, unique=True),
)
def test_config_round_trip(sub, alpha, fdr, R, n, beta, threads, adjusted, stats):
    cfg = RunConfig(subcommand=sub, inputs=("a.csv",), alpha=alpha, fdr=fdr, R=(tuple(R),), b0=(0.25,),
                    n=n, beta=beta, threads=threads, adjusted=adjusted, statistics=tuple(stats),
                    rois=((1, 2, 3, 4),), lattice=(7, 9))
    assert RunConfig.parse(cfg.render()) == cfg


def test_config_overrides_win():
    cfg = RunConfig.parse("alpha=0.1\nn=50\n# note\n", {"n": "60", "threads": 2})
    assert cfg.alpha == 0.1 and cfg.n == 60 and cfg.threads == 2
    with pytest.raises(ValueError, match="line 1"):
        RunConfig.parse("bogus=1\n")


def test_pgm_all_zero(tmp_path):
    write_pgm(tmp_path / "m.pgm", np.zeros((2, 3)), tmp_path / "s.txt")
    assert (tmp_path / "m.pgm").read_text() == "P2\n3 2\n255\n0 0 0\n0 0 0\n"


def _long_csv(path, data):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "time", "y"] + [f"x{k + 1}" for k in range(data.q)])
        for i in range(data.n):
            for j in range(data.sizes[i]):
                w.writerow([f"s{i}", repr(float(data.t[i, j])), repr(float(data.y[i, j]))]
                          + [repr(float(v)) for v in data.X[i, j]])
    return path


def test_cli_fit_and_test(tmp_path, capsys):
    src = _long_csv(tmp_path / "d.csv", gen_study1(40, 0.2, seed=1))
    assert main(["fit", str(src), "-o", str(tmp_path / "fit")]) == 0
    est = (tmp_path / "fit" / "estimates.csv").read_text().splitlines()
    assert est[0] == "theta1,theta2,theta3,theta4,se1,se2,se3,se4"
    assert main(["test", str(src), "--R", "0,0,0,1", "--b0", "0", "-o", str(tmp_path / "t")]) == 0
    rows = list(csv.DictReader((tmp_path / "t" / "tests.csv").open()))
    assert rows[0]["kind"] == "LR_Aetel" and rows[0]["df"] == "1"
    cfg = RunConfig.parse((tmp_path / "t" / "config.txt").read_text())
    assert cfg.R == ((0.0, 0.0, 0.0, 1.0),)


def test_cli_tetel_outputs_consistent_and_thread_independent(tmp_path):
    f = gen_study3(30, 0.4, lattice=(4, 4), rois=((1, 1, 2, 2),), seed=6)
    src = tmp_path / "f.csv"
    write_field_csv(f, src)
    outs = []
    for threads in (1, 3):
        out = tmp_path / f"o{threads}"
        code = main(["tetel", str(src), "--R", "0,0,0,1", "--b0", "0", "--fdr", "bh", "--threads", str(threads),
                     "-o", str(out)])
        assert code == 0
        outs.append(out)
    for name in ("estimates.csv", "tests.csv", "map_neglog10p.pgm", "map_scale.txt"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    rows = list(csv.DictReader((outs[0] / "tests.csv").open()))
    raw = np.array([float(r["p_raw"]) for r in rows])
    adj = np.array([float(r["p_adjusted"]) for r in rows])
    assert_allclose(adj, fdr_adjust(raw, "BH").adjusted, rtol=1e-15)
    assert (outs[0] / "map_neglog10p.pgm").read_text().startswith("P2\n4 4\n255\n")


def test_cli_simulate_thread_independent(tmp_path, monkeypatch):
    args = ["simulate", "--study", "I", "--n", "40", "--replications", "12", "--seed", "3"]
    assert main(args + ["-o", str(tmp_path / "a")]) == 0
    monkeypatch.setenv("ETEL_THREADS", "2")
    assert main(args + ["-o", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "rates.csv").read_bytes() == (tmp_path / "b" / "rates.csv").read_bytes()
    assert "threads=2" in (tmp_path / "b" / "config.txt").read_text()


def test_cli_fdr(tmp_path):
    src = write(tmp_path / "p.csv", "p\n0.01\n0.04\n")
    assert main(["fdr", str(src), "--fdr", "BH", "-o", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "fdr.csv").read_text() == "p,p_adjusted\n0.01,0.02\n0.04,0.04\n"


def test_cli_error_codes(tmp_path, capsys):
    assert main(["test", str(tmp_path / "missing.csv"), "--R", "1", "--b0", "0", "-o", str(tmp_path)]) == 4
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "io"
    bad = write(tmp_path / "bad.csv", "subject_id,time,y,x1\na,1,1,1\na,1,2,1\n")
    assert main(["fit", str(bad), "-o", str(tmp_path / "o")]) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "data"
    conf = write(tmp_path / "c.txt", "nonsense=1\n")
    assert main(["fit", str(bad), "--config", str(conf)]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "config"
    with pytest.raises(SystemExit) as exc:
        main(["test", str(bad)])
    assert exc.value.code == 2
