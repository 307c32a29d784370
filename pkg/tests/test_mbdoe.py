import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from oracles import trapezoid_by_hand

from kindisc.estimate import fit_rate_dynamic
from kindisc.expr import parse
from kindisc.mbdoe import DesignError, DesignProblem, design, objective
from kindisc.simulate import ISOMERIZATION, N2O, run_designed

ISO = ISOMERIZATION.species


def _problem(eta, mu, species=ISO, nu=(-1.0, 1.0), lower=(0, 0), upper=(10, 10), **kw):
    return DesignProblem((parse(eta[0], list(species)), eta[1]), (parse(mu[0], list(species)), mu[1]),
                         species, nu, lower, upper, **kw)


def iso_pair(**kw):
    truth = (ISOMERIZATION.truth, np.array(ISOMERIZATION.truth_params))
    return _problem(truth, ("p1*CA - p2*CB", np.array([0.6, 0.25])), **kw)


def test_identical_models_give_zero():
    m = ("p1*CA - p2*CB", np.array([0.6, 0.25]))
    p = _problem(m, m)
    for x0 in ((0, 0), (10, 0), (3, 7)):
        assert objective(p, x0) == 0.0


def test_inert_species_discrepancy_is_zero():
    # CB has coefficient 0 and starts at 0, so the extra term never acts
    p = _problem(("p1*CA", [1.0]), ("p1*CA + p2*CB", [1.0, 3.0]), nu=(-1.0, 0.0), upper=(10, 0))
    assert objective(p, (4.0, 0.0)) == 0.0


def test_objective_against_closed_form():
    # A' = -k A: trajectories 5 e^{-t} and 5 e^{-2t}
    p = _problem(("p1*CA", [1.0]), ("p1*CA", [2.0]), species=("CA",), nu=(-1.0,), lower=(0,), upper=(5,))
    t = p.grid
    diff2 = (5 * np.exp(-t) - 5 * np.exp(-2 * t)) ** 2
    assert objective(p, (5.0,)) == pytest.approx(trapezoid_by_hand(diff2, t), rel=1e-6)


def test_objective_matches_independent_integration():
    p = iso_pair()
    x0 = np.array([7.0, 1.5])
    th = ISOMERIZATION.truth_params

    def f_truth(_, y):
        r = (th[0] * y[0] - th[1] * y[1]) / (th[2] * y[0] + th[3] * y[1] + th[4])
        return [-r, r]

    def f_lin(_, y):
        r = 0.6 * y[0] - 0.25 * y[1]
        return [-r, r]

    grid = p.grid
    a = solve_ivp(f_truth, (0, 10), x0, t_eval=grid, rtol=1e-11, atol=1e-12).y.T
    b = solve_ivp(f_lin, (0, 10), x0, t_eval=grid, rtol=1e-11, atol=1e-12).y.T
    expected = trapezoid_by_hand(((a - b) ** 2).sum(axis=1), grid)
    assert objective(p, x0) == pytest.approx(expected, rel=1e-5)


def test_swap_symmetry():
    p = iso_pair()
    for x0 in ((2, 0), (10, 10), (5, 1)):
        assert objective(p, x0) == objective(p.swapped(), x0)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10))
def test_objective_non_negative_without_x0_term(a, b):
    assert objective(iso_pair(), (a, b)) >= 0.0


def test_x0_term_adds_the_sum():
    on, off = iso_pair(include_x0_term=True), iso_pair()
    assert objective(on, (4.0, 2.0)) == pytest.approx(objective(off, (4.0, 2.0)) + 6.0, rel=1e-12)


def test_monotone_toy_hits_upper_bound():
    p = _problem(("p1*CA", [1.0]), ("p1*CA", [2.0]), species=("CA",), nu=(-1.0,), lower=(0,), upper=(5,))
    res = design(p)
    assert res.x0[0] == 5.0


def test_degenerate_bounds_return_the_point():
    res = design(iso_pair(lower=(3, 4), upper=(3, 4)))
    np.testing.assert_array_equal(res.x0, [3.0, 4.0])


def test_design_stays_in_bounds_and_beats_lattice():
    p = iso_pair(lower=(1, 0), upper=(9, 2))
    res = design(p)
    assert np.all(res.x0 >= p.lower) and np.all(res.x0 <= p.upper)
    assert res.value >= max(v for _, v in res.landscape)
    assert res.value == pytest.approx(objective(p, res.x0))


def test_design_is_deterministic():
    a, b = design(iso_pair()), design(iso_pair())
    assert a.to_dict() == b.to_dict()
    assert a.landscape_csv(ISO) == b.landscape_csv(ISO)


def test_quadrature_grid_refinement():
    p = iso_pair()
    res = design(p)
    fine = iso_pair(n_grid=2 * p.n_grid - 1)
    assert abs(objective(fine, res.x0) / res.value - 1) < 1e-3


def test_unintegrable_everywhere_raises():
    # A' = +k A^2 leaves any box before t = 10 for A0 >= 1
    p = _problem(("p1*CA*CA", [5.0]), ("p1*CA", [1.0]), species=("CA",), nu=(1.0,), lower=(1,), upper=(5,))
    assert objective(p, (2.0,)) == float("-inf")
    with pytest.raises(DesignError):
        design(p)


def test_problem_validation():
    with pytest.raises(ValueError):
        iso_pair(lower=(5, 0), upper=(4, 10))
    with pytest.raises(ValueError):
        iso_pair(n_grid=8)
    with pytest.raises(ValueError):
        _problem(("p1*CA", [1.0, 2.0]), ("p1*CA", [1.0]))


def test_n2o_design_no_worse_than_reported_point():
    exps = run_designed(N2O, noise_seed=0)
    names = list(N2O.species)
    # reported candidates, written as forward rates with the library's coefficients
    r3 = fit_rate_dynamic(parse("p1*CNO - p2 - CNO", names), exps, N2O.stoichiometry)
    r2 = fit_rate_dynamic(parse("p1*CNO", names), exps, N2O.stoichiometry)
    lo, hi = N2O.bounds
    p = DesignProblem((r3.model, r3.theta), (r2.model, r2.theta), N2O.species, N2O.stoichiometry, lo, hi)
    res = design(p)
    assert res.value >= objective(p, (0.000, 1.522, 0.731))
