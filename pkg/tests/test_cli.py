import csv
import io
import json
import math
import subprocess
import sys
from pathlib import Path

import pytest

from tcmcap import cli
from tcmcap.cli import main
from tcmcap.solver import Level

GOLDEN = Path(__file__).parent / "golden"
# per-level absolute tolerances for the golden sweep
LEVEL_TOL = {"1": 1e-9, "2-full": 2e-3, "3-full": 5e-3}


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_pbar_quadratic_lattice(capsys):
    code, out, _ = run(capsys, "pbar", "--activation", "quadratic", "--lattice", "0:0.25:1")
    assert code == 0
    table = rows(out)
    assert table[0] == ["p", "pbar"]
    got = [float(r[1]) for r in table[1:]]
    assert got == pytest.approx([0.25, 0.28125, 0.375, 0.53125, 0.75], abs=1e-12)
    assert out.endswith("\n") and "\r" not in out


def test_pbar_endpoints(capsys):
    _, out, _ = run(capsys, "pbar", "--activation", "relu", "--lattice", "0:1:1")
    vals = [float(r[1]) for r in rows(out)[1:]]
    assert vals[0] == pytest.approx(1 / math.pi, abs=1e-11) and vals[1] == pytest.approx(1.0, abs=1e-11)
    _, out, _ = run(capsys, "pbar", "--activation", "erf", "--lattice", "0:0.5:0")
    assert abs(float(rows(out)[1][1])) < 1e-12


def test_pbar_twelve_digits(capsys):
    _, out, _ = run(capsys, "pbar", "--activation", "tanh", "--lattice", "0.3:0.1:0.3")
    assert len(rows(out)[1][1].replace(".", "").lstrip("0")) <= 12


@pytest.mark.parametrize("spec", ["0:0:1", "1:0.1:0", "a:b:c", "0:0.5"])
def test_pbar_bad_lattice(capsys, spec):
    code, _, err = run(capsys, "pbar", "--activation", "relu", "--lattice", spec)
    assert code == 2 and "lattice" in err


@pytest.mark.parametrize("sub", [None, "capacity", "sweep", "oracle", "pbar"])
def test_help_exits_zero(sub):
    argv = [sys.executable, "-m", "tcmcap"] + ([sub] if sub else []) + ["--help"]
    proc = subprocess.run(argv, capture_output=True, text=True)
    assert proc.returncode == 0 and "usage" in proc.stdout


@pytest.mark.parametrize(
    "argv",
    [
        ["capacity", "--activation", "relu", "--level", "7-full"],
        ["capacity", "--activation", "softsign", "--level", "1"],
        ["capacity", "--level", "1"],
        ["oracle", "--activation", "relu", "--d", "63", "--samples", "10"],
        ["oracle", "--activation", "relu", "--samples", "0"],
        ["pbar", "--activation", "relu,erf"],
        ["capacity", "--activation", "relu", "--level", "1", "--alpha-lo", "3", "--alpha-hi", "2"],
    ],
)
def test_usage_errors_write_nothing(tmp_path, capsys, argv):
    out = tmp_path / "out.csv"
    code, _, err = run(capsys, *argv, "--out", str(out))
    assert code == 2 and err
    assert list(tmp_path.iterdir()) == []


def test_unknown_flag_exits_nonzero(tmp_path):
    out = tmp_path / "x.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "tcmcap", "pbar", "--activation", "relu", "--bogus", "--out", str(out)], capture_output=True, text=True
    )
    assert proc.returncode == 2 and not out.exists()


def test_empty_level_list(capsys):
    code, _, err = run(capsys, "sweep", "--activation", "relu", "--level", ",")
    assert code == 2 and "level" in err


def test_odd_d_message(capsys):
    code, _, err = run(capsys, "oracle", "--activation", "relu", "--d", "63", "--samples", "10")
    assert code == 2 and "even" in err


def test_oracle_is_deterministic(capsys):
    argv = ("oracle", "--activation", "quadratic", "--d", "64", "--samples", "1000", "--seed", "1", "--format", "csv")
    first = run(capsys, *argv)
    second = run(capsys, *argv)
    assert first == second and first[0] == 0


def test_oracle_pretty_prints_limit(capsys):
    code, out, _ = run(capsys, "oracle", "--activation", "relu", "--d", "16", "--samples", "200", "--seed", "7")
    assert code == 0 and "limit  0.340845" in out and "gap" in out


def test_json_round_trip_is_bit_exact(capsys):
    from tcmcap import oracle

    code, out, _ = run(capsys, "oracle", "--activation", "erf", "--d", "32", "--samples", "500", "--seed", "3", "--format", "json")
    assert code == 0
    data = json.loads(out)
    est = oracle.mc_estimate("erf", oracle.McConfig(32, 500, 3))
    for key, val in est.to_dict().items():
        assert data[key] == val
    code, out, _ = run(capsys, "capacity", "--activation", "relu", "--level", "2-partial", "--format", "json")
    data = json.loads(out)
    assert float.hex(data["alpha_c"]) == float.hex(json.loads(json.dumps(data))["alpha_c"])
    assert data["row"]["alpha_c"] == data["alpha_c"]


def test_capacity_quadratic_level1(capsys):
    code, out, _ = run(capsys, "capacity", "--activation", "quadratic", "--level", "1", "--format", "csv")
    table = rows(out)
    assert code == 0
    rec = dict(zip(table[0], table[1]))
    assert float(rec["alpha_c"]) == 4.0
    assert table[0][3:12] == ["gamma_sq", "gamma_sq_p", "p3", "p2", "q3", "q2", "c3", "c2", "alpha_c"]


def test_capacity_erf_partial_note(capsys):
    code, out, err = run(capsys, "capacity", "--activation", "erf", "--level", "2-partial", "--level", "1", "--format", "csv")
    table = rows(out)
    assert code == 0 and "no improvement" in err
    assert table[1][-3] == table[2][-3]


def test_config_file_and_precedence(tmp_path, capsys):
    conf = tmp_path / "run.conf"
    conf.write_text("# oracle defaults\nactivation = quadratic\nd = 8\nsamples = 50\nseed = 4\nformat = json\n")
    code, out, _ = run(capsys, "oracle", "--config", str(conf))
    assert code == 0
    data = json.loads(out)
    assert (data["activation"], data["d"], data["samples"], data["seed"]) == ("quadratic", 8, 50, 4)
    code, out, _ = run(capsys, "oracle", "--config", str(conf), "--seed", "5", "--d", "10")
    data = json.loads(out)
    assert (data["d"], data["seed"]) == (10, 5)


def test_config_file_errors(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("colour = blue\n")
    assert run(capsys, "pbar", "--activation", "relu", "--config", str(conf))[0] == 2
    conf.write_text("samples = many\n")
    assert run(capsys, "oracle", "--activation", "relu", "--config", str(conf))[0] == 2
    assert run(capsys, "pbar", "--activation", "relu", "--config", str(tmp_path / "missing"))[0] == 2


def test_out_file_is_written(tmp_path, capsys):
    out = tmp_path / "curve.csv"
    code, stdout, _ = run(capsys, "pbar", "--activation", "quadratic", "--lattice", "0:0.5:1", "--out", str(out))
    assert code == 0 and stdout == ""
    assert out.read_bytes().decode("utf-8").splitlines()[0] == "p,pbar"
    assert [p.name for p in tmp_path.iterdir()] == ["curve.csv"]


def test_solver_failure_exit_code(capsys):
    code, _, err = run(capsys, "capacity", "--activation", "quadratic", "--level", "2-full", "--alpha-lo", "1.5", "--alpha-hi", "2.0")
    assert code == 3 and "solver failure" in err


def test_sweep_matrix_matches_golden(sweep_reports):
    names = ["relu", "quadratic", "erf", "tanh"]
    levels = [Level.parse(t) for t in cli.DEFAULT_SWEEP_LEVELS]
    got = cli._csv_text(["level"] + names, [[cli._fmt(v) for v in r] for r in cli.sweep_matrix(sweep_reports, names, levels)])
    want = (GOLDEN / "sweep.csv").read_text()
    got_rows, want_rows = rows(got), rows(want)
    assert got_rows[0] == want_rows[0]
    for g, w in zip(got_rows[1:], want_rows[1:]):
        assert g[0] == w[0]
        assert all(abs(float(a) - float(b)) <= LEVEL_TOL[g[0]] for a, b in zip(g[1:], w[1:]))
    plot = cli.plot_rows(sweep_reports, names, levels)
    want_plot = rows((GOLDEN / "sweep-plot.csv").read_text())
    assert want_plot[0] == ["activation", "level_index", "level", "alpha_c"]
    assert len(plot) == len(want_plot) - 1
    for (a, i, lv, v), w in zip(plot, want_plot[1:]):
        assert [a, str(i), lv] == w[:3] and abs(v - float(w[3])) <= LEVEL_TOL[lv]


def test_single_activation_sweep_writes_plot(tmp_path, capsys):
    out = tmp_path / "relu.csv"
    code, _, _ = run(capsys, "sweep", "--activation", "quadratic", "--level", "1", "--format", "csv", "--out", str(out))
    assert code == 0
    assert rows(out.read_text()) == [["level", "quadratic"], ["1", "4.0"]]
    assert rows((tmp_path / "relu-plot.csv").read_text())[1] == ["quadratic", "1", "1", "4.0"]
