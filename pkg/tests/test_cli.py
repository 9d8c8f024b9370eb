import csv
import json

import pytest

from qpsk_keyrate import cli
from qpsk_keyrate.cli import COLUMNS, RunConfig, fmt_number, grid, load_config, main

FAST = ["--nc", "3", "--ni", "5"]


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_number_format():
    assert fmt_number(0.123456789012345) == "0.123456789012"
    assert fmt_number(1.5e-4) == "1.50000000000e-04"
    assert fmt_number(-2.5e-7) == "-2.50000000000e-07"
    assert fmt_number(1234.5) == "1234.5"
    assert fmt_number(0.0) == "0"
    assert fmt_number(7) == "7"
    assert fmt_number(float("nan")) == "nan"


def test_grid_is_inclusive_and_exact():
    assert grid(0.6, 1.1, 0.01)[-1] == 1.1
    assert len(grid(0.6, 1.1, 0.01)) == 51
    assert grid(0.0, 0.0, 0.5) == [0.0]


def test_keyrate_json(tmp_path, capsys):
    out = tmp_path / "r.json"
    code = main(["keyrate", "--distance", "50", "--xi", "0.02", "--alpha", "0.7", "--out", str(out)] + FAST)
    rec = json.loads(out.read_text())
    assert code == 0
    assert list(rec) == list(COLUMNS)
    for key in ("rate", "gap", "eps_prime"):
        assert isinstance(rec[key], float)
    assert rec["beta"] == 0.95 and rec["delta"] == 0.0
    assert rec["dual"] <= rec["primal"]


def test_negative_delta_is_rejected(capsys):
    assert main(["keyrate", "--delta", "-0.5"] + FAST) == 1
    assert "delta" in capsys.readouterr().err


def test_no_key_exit_code(tmp_path):
    out = tmp_path / "r.json"
    assert main(["keyrate", "--distance", "50", "--xi", "0.15", "--out", str(out)] + FAST) == 2
    assert json.loads(out.read_text())["flag"] == "no-key"


def test_heterodyne_remap_not_usable_for_rates(capsys):
    assert main(["keyrate", "--scenario", "untrusted-heterodyne-remap"] + FAST) == 1
    assert "comparison" in capsys.readouterr().err


def test_config_file_and_overrides(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\nalpha = 0.62\nxi = 0.01\nnc = 3\n\n[scenario]\nkind = untrusted-homodyne\n"
                   "xi_hom = 0.001\n\n[sweep]\ndistances = 0, 10\n")
    values = load_config(cfg)
    assert values["n_cutoff"] == 3 and values["distances"] == (0.0, 10.0)
    run = RunConfig(**values)
    assert run.scenario == "untrusted-homodyne"
    assert run.effective_xi() == pytest.approx(0.011)
    out = tmp_path / "s.csv"
    assert main(["sweep-distance", "--config", str(cfg), "--ni", "3", "--xi", "0.0", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert [float(r["xi_eff"]) for r in rows] == pytest.approx([0.001, 0.001 / 10 ** -0.2])


@pytest.mark.parametrize("text, needle", [
    ("[run]\nalpha = abc\n", "line 2: [run] alpha"),
    ("[run]\nwobble = 1\n", "wobble"),
    ("[extras]\nx = 1\n", "extras"),
    ("[run]\nalpha\n", "line 2"),
])
def test_config_errors_name_field(tmp_path, capsys, text, needle):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(text)
    assert main(["keyrate", "--config", str(cfg)]) == 1
    assert needle in capsys.readouterr().err


def test_sweep_rows_and_eta(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sweep-distance", "--distances", "40,0,20", "--xi", "0.02", "--out", str(out)] + FAST) == 0
    rows = read_csv(out)
    assert [float(r["distance_km"]) for r in rows] == [0, 20, 40]
    for r in rows:
        assert float(r["eta"]) == pytest.approx(10 ** (-0.02 * float(r["distance_km"])), rel=1e-11)
    assert list(rows[0]) == list(COLUMNS)


def test_optimize_amplitude_single_point_grid(tmp_path):
    out = tmp_path / "a.json"
    code = main(["optimize-amplitude", "--alpha-range", "0.7:0.7:0.01", "--distance", "10", "--xi", "0.02",
                 "--format", "json", "--out", str(out)] + FAST)
    doc = json.loads(out.read_text())
    assert code == 0
    assert doc["best_alpha"] == 0.7
    assert len(doc["grid"]) == 1


def test_optimize_amplitude_row_count(tmp_path):
    out = tmp_path / "a.csv"
    main(["optimize-amplitude", "--alpha-range", "0.6:0.7:0.05", "--distance", "10", "--xi", "0.02",
          "--out", str(out)] + FAST)
    assert len(read_csv(out)) == 3


def test_optimize_delta_pass_probability_falls(tmp_path):
    out = tmp_path / "d.csv"
    main(["optimize-delta", "--delta-max", "0.6", "--delta-step", "0.2", "--distance", "10", "--xi", "0.02",
          "--out", str(out)] + FAST)
    rows = read_csv(out)
    p = [float(r["p_pass_q"]) for r in rows]
    assert len(rows) == 4
    assert all(b < a for a, b in zip(p, p[1:]))


def test_noise_tolerance_bisection_contract(tmp_path):
    out = tmp_path / "n.json"
    main(["noise-tolerance", "--distance", "5", "--format", "json", "--out", str(out)] + FAST)
    doc = json.loads(out.read_text())
    tol = doc["tolerance"]
    probes = {p["xi"]: p["rate"] for p in doc["probes"]}
    assert tol > 0 and probes[tol] > 0
    above = [xi for xi in probes if tol < xi <= tol + 1e-4 + 1e-12]
    assert above and all(probes[xi] <= 0 for xi in above)


def test_rerun_and_parallel_outputs_identical(tmp_path):
    args = ["sweep-distance", "--distances", "0,30", "--xi", "0.01"] + FAST
    main(args + ["--out", str(tmp_path / "a.csv")])
    main(args + ["--out", str(tmp_path / "b.csv")])
    main(args + ["--jobs", "2", "--out", str(tmp_path / "c.csv")])
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes() == (tmp_path / "c.csv").read_bytes()


def test_timing_is_opt_in(tmp_path):
    out = tmp_path / "t.csv"
    main(["keyrate", "--format", "csv", "--timing", "--out", str(out)] + FAST)
    assert float(read_csv(out)[0]["seconds"]) > 0


def test_emit_plot(tmp_path):
    src = tmp_path / "s.csv"
    src.write_text("distance_km,rate,alpha\n0,0.2,0.6\n10,0.1,0.6\n0,0.25,0.7\n")
    paths = cli.emit_plot(str(src), "distance_km", "rate", "alpha", str(tmp_path / "curve.dat"))
    assert len(paths) == 2
    lines = open(paths[0]).read().splitlines()
    assert lines[0].startswith("#") and lines[1:] == ["0 0.2", "10 0.1"]
    assert main(["emit-plot", str(src), "--out", str(tmp_path / "one.dat")]) == 0
