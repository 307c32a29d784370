import math
import shutil

import numpy as np
import pytest

from kindisc.config import RunConfig
from kindisc.estimate import FitResult
from kindisc.expr import n_params, parse
from kindisc.pipeline import (
    BUDGET_EXHAUSTED,
    SATISFIED,
    DiscoveryState,
    PipelineError,
    SeriesSurrogate,
    build_surrogates,
    concentration_spec,
    derive_seed,
    discover,
    estimate_rates,
    fit_series,
    load_state,
    rate_spec,
)
from kindisc.config import DEFAULT_RATE_CONSTRAINTS
from kindisc.simulate import N2O, ExperimentDataset, run_designed

T15 = np.linspace(0, 10, 15)


def small_config(case="n2o", **top):
    """Desk-scale searches so a full round runs in seconds."""
    d = {
        "schema_version": 1,
        "case": case,
        "concentration": {"gp": {"population_size": 30, "generations": 2, "max_complexity": 7},
                          "optimizer": {"n_restarts": 2}},
        "rate": {"gp": {"population_size": 40, "generations": 2, "max_complexity": 9},
                 "optimizer": {"n_restarts": 1, "presearch_population": 0}, "max_refine": 3},
        "mbdoe": {"n_grid": 41, "lattice_points": 2, "n_starts": 1},
        **top,
    }
    return RunConfig.from_dict(d)


def _surrogate(eid, species, text, theta):
    tree = parse(text, ["t"])
    fit = FitResult(tree, np.asarray(theta, float), 0.0, 0.0, 0.0, 2.0 * n_params(tree), 15, n_params(tree))
    return SeriesSurrogate(eid, species, fit, 0)


def _exp(eid=1, species=("CA",), x0=(5.0,), values=None):
    values = np.zeros((15, len(species))) if values is None else values
    return ExperimentDataset(eid, species, x0, T15, values)


# seeds

def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert len({derive_seed(0, 1, k) for k in range(50)}) == 50
    assert 0 <= derive_seed(7) < 2**32


# constraint instantiation

def test_concentration_spec_targets_known_x0():
    e = _exp(values=np.linspace(5, 1, 15)[:, None])
    from kindisc.config import DEFAULT_CONCENTRATION_CONSTRAINTS

    spec = concentration_spec(e, "CA", DEFAULT_CONCENTRATION_CONSTRAINTS)
    kinds = {x.kind: x for x in spec.entries}
    assert kinds["initial_condition"].target == 5.0
    assert kinds["monotonicity"].direction == -1
    assert kinds["sign"].sign == 1
    assert all(x.label.startswith("E1:CA:") for x in spec.entries)
    off = concentration_spec(e, "CA", DEFAULT_CONCENTRATION_CONSTRAINTS, constraints_off=True)
    assert all(x.weight == 0.0 for x in off.entries)


def test_flat_series_gets_no_monotone_entry():
    e = _exp(values=np.full((15, 1), 5.0))
    from kindisc.config import DEFAULT_CONCENTRATION_CONSTRAINTS

    spec = concentration_spec(e, "CA", DEFAULT_CONCENTRATION_CONSTRAINTS)
    assert "monotonicity" not in {x.kind for x in spec.entries}


def test_rate_sign_is_pooled_over_experiments():
    exps = [_exp(1, values=np.linspace(5, 1, 15)[:, None]), _exp(2, x0=(0.0,))]
    surs = {(1, "CA"): _surrogate(1, "CA", "exp(p1 - t/p2)", [math.log(5), 2.0]),
            (2, "CA"): _surrogate(2, "CA", "p1 + p2*t", [0.0, 1e-3])}
    rates = estimate_rates(surs, exps, (-1.0,))
    spec = rate_spec(rates, DEFAULT_RATE_CONSTRAINTS)
    signs = {x.label: x.sign for x in spec.entries if x.kind == "sign"}
    assert signs == {"E1:rate:sign": 1, "E2:rate:sign": 1}


# rates

def test_rate_from_exponential_surrogate():
    surs = {(1, "CA"): _surrogate(1, "CA", "exp(p1 - t/p2)", [math.log(5), 2.0])}
    rates = estimate_rates(surs, [_exp()], (-1.0,))
    assert rates.rate[0] == pytest.approx(2.5, rel=1e-12)
    assert rates.time[0] == 0.0 and rates.source[0] == "CA" and rates.surrogate_id[0] == "E1:CA"


def test_constant_surrogate_gives_zero_rates():
    surs = {(1, "CA"): _surrogate(1, "CA", "p1", [3.0])}
    rates = estimate_rates(surs, [_exp()], (-1.0,))
    np.testing.assert_array_equal(rates.rate, 0.0)
    np.testing.assert_array_equal(rates.states[:, 0], 3.0)


def test_pooled_row_count():
    exps = run_designed(N2O)
    surs = {(e.experiment_id, s): _surrogate(e.experiment_id, s, "p1*exp(0 - t/p2)", [1.0, 3.0])
            for e in exps for s in N2O.species}
    rates = estimate_rates(surs, exps, N2O.stoichiometry)
    assert len(rates) == 225 and rates.dropped == 0
    lines = rates.to_csv().splitlines()
    assert lines[0] == "experiment_id,time_h,species,rate_M_per_h,surrogate_id,state_CNO,state_CN,state_CO"
    assert len(lines) == 226


@pytest.mark.parametrize("c", [0.5, 2.0, -3.0])
def test_rates_linear_in_surrogate(c):
    e = [_exp()]
    base = estimate_rates({(1, "CA"): _surrogate(1, "CA", "p1*exp(0 - t/p2)", [5.0, 2.0])}, e, (-1.0,))
    scaled = estimate_rates({(1, "CA"): _surrogate(1, "CA", "p1*exp(0 - t/p2)", [5.0 * c, 2.0])}, e, (-1.0,))
    np.testing.assert_allclose(scaled.rate, c * base.rate, rtol=1e-13)


def test_zero_coefficient_species_adds_no_rows():
    e = _exp(species=("CA", "CI"), x0=(5.0, 1.0), values=np.zeros((15, 2)))
    surs = {(1, "CA"): _surrogate(1, "CA", "p1*exp(0 - t/p2)", [5.0, 2.0]),
            (1, "CI"): _surrogate(1, "CI", "p1", [1.0])}
    rates = estimate_rates(surs, [e], (-1.0, 0.0))
    assert len(rates) == 15 and set(rates.source) == {"CA"}


def test_non_finite_rows_are_dropped():
    surs = {(1, "CA"): _surrogate(1, "CA", "p1/t", [1.0])}
    rates = estimate_rates(surs, [_exp()], (-1.0,))
    assert rates.dropped == 1 and len(rates) == 14


def test_missing_surrogate_is_a_pipeline_error():
    with pytest.raises(PipelineError, match="series"):
        estimate_rates({}, [_exp()], (-1.0,))


# surrogates

def test_constant_series_selects_constant():
    cfg = small_config()
    e = ExperimentDataset(1, N2O.species, (0.0, 2.0, 3.0), T15,
                          np.column_stack([np.zeros(15), np.full(15, 2.0), np.full(15, 3.0)]))
    sur = fit_series(e, "CN", cfg)
    assert sur.fit.complexity == 1
    assert sur.theta[0] == pytest.approx(2.0)


def test_surrogates_are_deterministic_and_cached():
    cfg = small_config()
    exps = run_designed(N2O)[:2]
    a = build_surrogates(exps, cfg)
    b = build_surrogates(exps, cfg)
    assert [s.to_dict() for s in a.values()] == [s.to_dict() for s in b.values()]
    cached = build_surrogates(exps, cfg, cache=a)
    assert all(cached[k] is a[k] for k in a)
    threaded = build_surrogates(exps, cfg, threads=2)
    assert [s.to_dict() for s in threaded.values()] == [s.to_dict() for s in a.values()]


def test_surrogate_json_round_trip():
    s = _surrogate(3, "CB", "exp(p1 - t/p2)", [1.0, 2.0])
    again = SeriesSurrogate.from_dict(s.to_dict())
    assert again.to_dict() == s.to_dict()
    np.testing.assert_array_equal(again.derivative(T15), s.derivative(T15))


# discovery loop

def test_budget_equal_to_initial_runs_one_round(tmp_path):
    cfg = small_config(budget=5)
    state = discover(cfg, run_dir=tmp_path)
    assert len(state.rounds) == 1
    assert state.stop_reason in (BUDGET_EXHAUSTED, SATISFIED)
    if not state.match:
        assert state.stop_reason == BUDGET_EXHAUSTED
    assert (tmp_path / "round_1" / "complete").exists()
    assert (tmp_path / "report.json").exists()
    assert not (tmp_path / "round_1" / "mbdoe.json").exists() or state.match


@pytest.fixture(scope="module")
def two_rounds(tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    cfg = small_config(budget=6)
    state = discover(cfg, run_dir=run)
    return cfg, run, state


def test_rounds_add_one_experiment_each(two_rounds):
    cfg, run, state = two_rounds
    counts = [len(r.experiment_ids) for r in state.rounds]
    assert counts == list(range(5, 5 + len(counts)))
    for r in state.rounds:
        assert math.isfinite(r.best.aic)
        if r.runner_up is not None:
            assert r.best.aic <= r.runner_up.aic
    if len(state.rounds) == 2:
        new = state.experiments[-1]
        assert new.provenance == "mbdoe_round_1"
        lo, hi = N2O.bounds
        assert np.all(new.x0 >= lo) and np.all(new.x0 <= hi)


def test_report_fields(two_rounds):
    cfg, run, state = two_rounds
    rep = state.report()
    assert rep["label"] == "PI-ADoK"
    assert rep["n_experiments"] == len(state.experiments)
    assert len(rep["aic_trace"]) == len(state.rounds)
    from kindisc.expr import bind, serialize

    assert rep["selected_expression"] == serialize(bind(state.best.model, state.best.theta))
    assert rep["seeds"] == cfg.seeds.to_dict()


def test_load_state_matches(two_rounds):
    cfg, run, state = two_rounds
    again = load_state(run, cfg)
    assert again.report() == state.report()
    assert isinstance(again, DiscoveryState)


def test_resume_reproduces_later_rounds(two_rounds, tmp_path):
    cfg, run, state = two_rounds
    if len(state.rounds) < 2:
        pytest.skip("the first round already matched")
    part = tmp_path / "partial"
    shutil.copytree(run, part)
    shutil.rmtree(part / "round_2")
    (part / "report.json").unlink()
    discover(cfg, run_dir=part, resume=True)
    files = sorted(p.relative_to(run) for p in run.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(part) for p in part.rglob("*") if p.is_file())
    for f in files:
        assert (run / f).read_bytes() == (part / f).read_bytes(), f


def test_blind_mode_confirm_stops(tmp_path):
    cfg = small_config(budget=6, mode="blind")
    seen = []
    state = discover(cfg, run_dir=tmp_path, confirm=lambda st: seen.append(len(st.rounds)) or True)
    assert state.stop_reason == SATISFIED and len(state.rounds) == 1 and seen == [1]
    assert state.match is None


def test_budget_below_initial_is_rejected():
    cfg = small_config()
    with pytest.raises(PipelineError):
        discover(cfg, run_designed(N2O) + run_designed(N2O)[:1])
