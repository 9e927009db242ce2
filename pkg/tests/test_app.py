import json

import pytest

import app
from modelspec import builtin_lotka_volterra, load_model, print_model


def test_simulate_clamped_predator_to_csv(tmp_path):
    out = tmp_path / "lv.csv"
    code = app.main(["simulate", "--builtin", "lv", "--do", "X2=2", "--t-end", "50", "--out", str(out)])
    assert code == app.EXIT_OK
    lines = out.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "t,X1,X2"
    assert lines[-1].startswith("# terminated")
    t, x1, x2 = (float(v) for v in lines[-2].split(","))
    assert t == pytest.approx(50.0)
    assert x1 < 1e-6
    assert x2 == 2.0


def test_simulate_writes_gnuplot_script(tmp_path):
    out, script = tmp_path / "chain.csv", tmp_path / "chain.gp"
    code = app.main(["simulate", "--builtin", "mass-spring", "--points", "20", "--out", str(out),
                     "--gnuplot", str(script)])
    assert code == app.EXIT_OK
    assert len(out.read_text(encoding="utf-8").splitlines()) == 23
    assert "using 1:5" in script.read_text(encoding="utf-8")


def test_gnuplot_needs_csv_file(capsys):
    assert app.main(["simulate", "--builtin", "lv", "--gnuplot", "x.gp"]) == app.EXIT_USAGE


def test_bad_model_file_is_a_usage_error(tmp_path, capsys):
    path = tmp_path / "broken.model"
    path.write_text("var X in (-inf,inf)\ndyn X = X +\ninit X = 1\n", encoding="utf-8")
    assert app.main(["simulate", "--model", str(path)]) == app.EXIT_USAGE
    assert "line 2" in capsys.readouterr().err


def test_missing_model_file(tmp_path):
    assert app.main(["export", "--model", str(tmp_path / "absent.model")]) == app.EXIT_USAGE


def test_lotka_volterra_is_refuted(capsys):
    code = app.main(["stability", "--builtin", "lv", "--trials", "3", "--t-max", "300"])
    assert code == app.EXIT_FAIL
    assert "refuted" in capsys.readouterr().out


def test_degenerate_clamp_is_refuted():
    assert app.main(["stability", "--builtin", "lv", "--do", "X2=1", "--trials", "4"]) == app.EXIT_FAIL


def test_structural_stability_of_mass_spring(capsys):
    code = app.main(["stability", "--builtin", "mass-spring", "--structural", "--trials", "3",
                     "--xi-draws", "2", "--t-max", "200"])
    assert code == app.EXIT_OK
    assert "stable-w.r.t.-probes" in capsys.readouterr().out


def test_unknown_stability_target():
    assert app.main(["stability", "--builtin", "lv", "--targets", "X9"]) == app.EXIT_USAGE


def test_lotka_volterra_scm_is_refused(capsys):
    assert app.main(["derive", "--builtin", "lv", "--to", "scm"]) == app.EXIT_REFUSED
    assert "generic-only" in capsys.readouterr().err


def test_forced_lotka_volterra_scm(capsys):
    assert app.main(["derive", "--builtin", "lv", "--to", "scm", "--force"]) == app.EXIT_OK
    assert "X[X1]:" in capsys.readouterr().out


def test_derive_lee_to_directory(tmp_path):
    assert app.main(["derive", "--builtin", "lv", "--to", "lee", "--out", str(tmp_path)]) == app.EXIT_OK
    text = (tmp_path / "lotka-volterra.lee.txt").read_text(encoding="utf-8")
    assert text.startswith("E[X1]: 0 = X1 * (th11 - th12 * X2)")
    assert (tmp_path / "lotka-volterra.lee.dot").read_text(encoding="utf-8").startswith("digraph lotka_volterra_lee {")


def test_derive_mass_spring_scm_from_file(tmp_path, data_dir):
    model = data_dir / "mass_spring_2.model"
    code = app.main(["derive", "--model", str(model), "--to", "scm", "--positions-only", "--out", str(tmp_path)])
    assert code == app.EXIT_OK
    dot = (tmp_path / "mass_spring_2.scm.dot").read_text(encoding="utf-8")
    assert '"X1" -> "X2";' in dot and '"X2" -> "X1";' in dot
    assert "P1 =" not in (tmp_path / "mass_spring_2.scm.txt").read_text(encoding="utf-8")


def test_solve_mass_spring_with_scm(capsys):
    assert app.main(["solve", "--builtin", "mass-spring", "--scm"]) == app.EXIT_OK
    out = capsys.readouterr().out
    assert "LEE SOLVE" in out and "SCM SOLVE" in out
    assert "Q1=1," in out and "Q2=2," in out


def test_solve_lotka_volterra_finds_two_equilibria():
    assert app.main(["solve", "--builtin", "lv"]) == app.EXIT_FAIL


def test_verify_clamped_predator(tmp_path):
    out = tmp_path / "report.jsonl"
    assert app.main(["verify", "--builtin", "lv", "--do", "X2=2", "--out", str(out)]) == app.EXIT_OK
    records = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
    assert [r["check"] for r in records] == ["theorem1", "lemma1", "diagram"]
    assert [r["outcome"] for r in records] == ["pass", "precondition-unmet", "precondition-unmet"]
    assert all(r["intervention"] == "do(X2=2.0)" for r in records)


def test_verify_three_mass_chain(capsys):
    assert app.main(["verify", "--builtin", "mass-spring", "--D", "3", "--do", "Q2=2.5"]) == app.EXIT_OK
    records = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
    assert {r["outcome"] for r in records} == {"pass"}


def test_suite_takes_no_model():
    assert app.main(["verify", "--suite", "default", "--builtin", "lv"]) == app.EXIT_USAGE


def test_export_round_trip(tmp_path):
    assert app.main(["export", "--builtin", "lv", "--out", str(tmp_path)]) == app.EXIT_OK
    loaded = load_model(tmp_path / "lotka-volterra.model")
    assert print_model(loaded) == print_model(builtin_lotka_volterra())
    assert (tmp_path / "lotka-volterra.dot").exists()


@pytest.mark.parametrize("argv", [
    ["simulate", "--builtin", "lv", "--do", "X9=1"],
    ["simulate", "--builtin", "lv", "--do", "X2"],
    ["simulate", "--builtin", "lv", "--do", "X2=abc"],
    ["simulate", "--builtin", "lv", "--do", "X2=1,X2=2"],
    ["simulate", "--builtin", "lv", "--model", "data/lotka_volterra.model"],
    ["simulate"],
    ["simulate", "--builtin", "lv", "--theta", "1,2"],
    ["simulate", "--builtin", "lv", "--t-end", "0"],
    ["simulate", "--builtin", "lv", "--no-such-flag"],
    ["frobnicate"],
])
def test_usage_errors(argv, capsys):
    assert app.main(argv) == app.EXIT_USAGE


def test_help_exits_cleanly(capsys):
    assert app.main(["--help"]) == app.EXIT_OK
    assert "ode2scm" in capsys.readouterr().out


def test_seed_from_environment(monkeypatch):
    monkeypatch.setenv("ODE2SCM_SEED", "7")
    assert app.default_seed() == 7
    monkeypatch.setenv("ODE2SCM_SEED", "seven")
    assert app.default_seed() == 0
    monkeypatch.setenv("ODE2SCM_SEED", "-5")
    assert app.default_seed() == 0


def test_negative_seed_is_a_usage_error(capsys):
    assert app.main(["stability", "--builtin", "lv", "--seed", "-1"]) == app.EXIT_USAGE
    assert "non-negative" in capsys.readouterr().err


def test_negative_environment_seed_falls_back_to_zero(monkeypatch, caplog):
    monkeypatch.setenv("ODE2SCM_SEED", "-5")
    assert app.main(["stability", "--builtin", "lv", "--trials", "3", "--t-max", "300"]) == app.EXIT_FAIL
    assert "ODE2SCM_SEED" in caplog.text
