import json
import shutil

import pytest

from kindisc.cli import EXIT_CONFIG, EXIT_NO_MATCH, EXIT_OK, EXIT_PIPELINE, main

SMALL = {
    "schema_version": 1,
    "case": "n2o",
    "budget": 5,
    "concentration": {"gp": {"population_size": 30, "generations": 2, "max_complexity": 7},
                      "optimizer": {"n_restarts": 2}},
    # without division the true rate law cannot be written, so no match is possible
    "rate": {"gp": {"population_size": 30, "generations": 2, "max_complexity": 7, "operators": ["+", "-", "*"]},
             "optimizer": {"n_restarts": 1, "presearch_population": 0}, "max_refine": 2},
    "uq": {"mh": {"n_iter": 300, "tuning_steps": 100}, "n_draws": 10},
}


def _write(tmp_path, d, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return str(p)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    out = tmp / "run"
    code = main(["discover", "--config", _write(tmp, SMALL), "--out", str(out)])
    return code, out


def test_simulate_writes_all_measurements(tmp_path, capsys):
    cfg = _write(tmp_path, {"schema_version": 1, "case": "n2o"})
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "b")]) == EXIT_OK
    a = (tmp_path / "a" / "datasets.csv").read_bytes()
    assert a == (tmp_path / "b" / "datasets.csv").read_bytes()
    assert len(a.decode().splitlines()) == 226
    assert "225 measurements" in capsys.readouterr().out


def test_seed_override_changes_data(tmp_path):
    cfg = _write(tmp_path, {"schema_version": 1, "case": "n2o"})
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["simulate", "--config", cfg, "--out", str(tmp_path / "b"), "--seed-override", "noise_seed=9"])
    assert (tmp_path / "a" / "datasets.csv").read_bytes() != (tmp_path / "b" / "datasets.csv").read_bytes()


@pytest.mark.parametrize("argv_tail", [
    [],
    ["--seed-override", "colour_seed=1"],
    ["--seed-override", "gp_seed"],
    ["--seed-override", "gp_seed=x"],
    ["--threads", "0"],
])
def test_config_errors_exit_2(tmp_path, argv_tail, capsys):
    cfg = ["--config", _write(tmp_path, {"schema_version": 1, "case": "n2o"})] if argv_tail else []
    assert main(["simulate", *cfg, "--out", str(tmp_path), *argv_tail]) == EXIT_CONFIG
    assert capsys.readouterr().err


def test_unknown_species_exits_2(tmp_path, capsys):
    cfg = _write(tmp_path, {"schema_version": 1, "case": "n2o", "rate": {"gp": {"variables": ["CX"]}}})
    assert main(["discover", "--config", cfg, "--out", str(tmp_path / "r")]) == EXIT_CONFIG
    assert "rate.gp.variables[0]" in capsys.readouterr().err


def test_no_match_exits_4(run_dir):
    code, out = run_dir
    assert code == EXIT_NO_MATCH
    report = json.loads((out / "report.json").read_text())
    assert report["match"] is False and report["stop_reason"] == "budget_exhausted"


def test_resume_with_other_settings_exits_2(run_dir, tmp_path):
    _, out = run_dir
    other = dict(SMALL, budget=6)
    assert main(["discover", "--config", _write(tmp_path, other), "--resume", str(out)]) == EXIT_CONFIG


def test_resume_finished_run_is_stable(run_dir, tmp_path):
    _, out = run_dir
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    assert main(["discover", "--resume", str(copy)]) == EXIT_NO_MATCH
    assert (copy / "report.json").read_bytes() == (out / "report.json").read_bytes()


def test_uq_and_report(run_dir, tmp_path, capsys):
    _, out = run_dir
    copy = tmp_path / "copy"
    shutil.copytree(out, copy)
    assert main(["uq", "--out", str(copy)]) == EXIT_OK
    diag = json.loads((copy / "uq" / "diagnostics.json").read_text())
    assert diag["n_samples"] > 0 and 0.0 <= diag["acceptance_rate"] <= 1.0
    assert (copy / "uq" / "bands.csv").read_text().startswith("experiment_id,time_h,species,mean,")
    assert main(["report", "--resume", str(copy)]) == EXIT_OK
    trace = (copy / "aic_trace.csv").read_text().splitlines()
    assert trace[0] == "round,n_experiments,aic,model,match" and len(trace) == 2
    assert len((copy / "fits.csv").read_text().splitlines()) == 226


def test_uq_without_rounds_exits_3(tmp_path):
    cfg = _write(tmp_path, {"schema_version": 1, "case": "n2o"})
    assert main(["uq", "--config", cfg, "--out", str(tmp_path / "empty")]) == EXIT_PIPELINE
