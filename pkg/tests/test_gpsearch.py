import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kindisc._objective import Layout
from kindisc.constraints import ConstraintEntry, ConstraintSpec
from kindisc.expr import BINARY_OPS, BinOp, Num, Var, complexity, depth, parse, serialize, structurally_equal
from kindisc.gpsearch import Champion, ChampionTable, GPConfig, crossover, mutate, search
from kindisc.simulate import N2O, run_designed

SMALL = GPConfig(population_size=60, generations=6, max_complexity=7, operators=("+", "-", "*", "/"))


def _n2o_rates():
    """Exact rate targets at the noiseless N2O trajectories."""
    exps = run_designed(N2O, sigma=0.0)
    c = np.concatenate([e.values[:, 0] for e in exps])
    return {"CNO": c}, 2 * c * c / (1 + 5 * c)


# config validation

@pytest.mark.parametrize("change", [
    {"p_crossover": 1.5},
    {"max_complexity": 2},
    {"population_size": 8, "tournament_size": 5},
    {"operators": ("+", "sin")},
    {"const_range": (1.0, -1.0)},
])
def test_config_rejects_invalid(change):
    with pytest.raises(ValueError):
        GPConfig(**change)


def test_config_round_trip():
    cfg = GPConfig(seed=3, variables=("CA", "CB"))
    assert GPConfig.from_dict(cfg.to_dict()) == cfg


# search

def test_constant_data_gives_constant_champion():
    t = np.linspace(0, 10, 15)
    table = search({"t": t}, np.full(15, 5.0), None, SMALL.with_(max_complexity=3, variables=("t",)))
    champ = table[1]
    assert champ.complexity == 1
    assert champ.fitness == pytest.approx(0.0, abs=1e-12)
    assert float(champ.theta[0]) == pytest.approx(5.0)


def test_champion_complexity_matches_level():
    X, y = _n2o_rates()
    table = search(X, y, None, SMALL.with_(variables=("CNO",)))
    for k, champ in table.items():
        assert complexity(champ.tree) == k <= SMALL.max_complexity
        assert depth(champ.tree) <= SMALL.max_depth


def test_search_is_seed_deterministic():
    X, y = _n2o_rates()
    cfg = SMALL.with_(variables=("CNO",), seed=7)
    a, b = search(X, y, None, cfg), search(X, y, None, cfg)
    assert a.to_dict() == b.to_dict()
    assert a.trace_csv() == b.trace_csv()


def test_best_fitness_per_level_never_increases():
    X, y = _n2o_rates()
    table = search(X, y, None, SMALL.with_(variables=("CNO",), seed=1))
    last = {}
    for row in table.trace:
        k, f = row["complexity"], row["best_fitness"]
        assert f <= last.get(k, np.inf)
        last[k] = f


def test_zero_weights_make_fitness_plain_sse():
    X, y = _n2o_rates()
    spec = ConstraintSpec((ConstraintEntry("sign", grid={"CNO": X["CNO"]}, sign=1),)).disabled()
    table = search(X, y, spec, SMALL.with_(variables=("CNO",)))
    for champ in table.champions():
        assert champ.fitness == champ.sse


def test_penalty_is_strictly_additive_for_wrong_sign():
    X, y = _n2o_rates()
    grid = {"CNO": np.sort(np.unique(X["CNO"]))[::-1]}
    spec = ConstraintSpec((ConstraintEntry("sign", grid=grid, sign=1),))
    layout = Layout(X, y, spec)
    from kindisc.expr import compile_tree

    fn = compile_tree(parse("0 - p1*CNO", ["CNO"]))
    theta = np.array([0.5])
    assert layout.objective(fn, theta) > layout.sse(fn, theta)
    assert layout.objective(fn, theta) == pytest.approx(
        layout.sse(fn, theta) + spec.report(fn, theta).total, rel=1e-12)


def test_empty_table_when_nothing_is_finite():
    t = np.array([0.0, 1.0])
    table = search({"t": t}, np.array([np.nan, np.nan]), None,
                   SMALL.with_(population_size=10, generations=1, variables=("t",)))
    assert len(table) == 0
    assert table.diagnostic


def test_noiseless_n2o_rate_structure_is_found_within_seed_budget():
    X, y = _n2o_rates()
    grid = {"CNO": np.sort(np.unique(X["CNO"]))[::-1]}
    spec = ConstraintSpec((ConstraintEntry("sign", grid=grid, sign=1),
                           ConstraintEntry("monotonicity", grid=grid, direction=-1)))
    found = []
    for seed in range(5):
        table = search(X, y, spec, GPConfig(variables=("CNO",), operators=("+", "-", "*", "/"), seed=seed))
        found.append(any(structurally_equal(c.tree, N2O.truth_tree) for c in table.champions()))
        if found[-1]:
            break
    assert any(found)


# champion table

def test_equal_sse_smaller_penalty_wins():
    tree = parse("p1*t", ["t"])
    table = ChampionTable()
    table.offer(Champion(tree, np.array([1.0]), fitness=3.0, sse=1.0))
    assert table.offer(Champion(tree, np.array([2.0]), fitness=1.5, sse=1.0))
    assert not table.offer(Champion(tree, np.array([3.0]), fitness=2.0, sse=1.0))
    assert table[3].theta[0] == 2.0


def test_tie_keeps_incumbent():
    tree = parse("p1*t", ["t"])
    table = ChampionTable()
    table.offer(Champion(tree, np.array([1.0]), 1.0, 1.0))
    assert not table.offer(Champion(tree, np.array([9.0]), 1.0, 1.0))


def test_table_json_round_trip():
    X, y = _n2o_rates()
    table = search(X, y, None, SMALL.with_(variables=("CNO",)))
    again = ChampionTable.from_dict(table.to_dict())
    assert again.to_dict() == table.to_dict()


# variation

def test_crossover_of_constants_is_valid():
    rng = np.random.default_rng(0)
    a, b = crossover(Num(1.0), Num(2.0), SMALL, rng)
    assert isinstance(a, Num) and isinstance(b, Num)


def test_point_mutation_swaps_operator():
    rng = np.random.default_rng(0)
    tree = BinOp("+", Var("t"), Var("t"))
    cfg = SMALL.with_(variables=("t",))
    seen = set()
    for _ in range(50):
        child = mutate(tree, cfg, rng, "point")
        if isinstance(child, BinOp) and child != tree:
            seen.add(child.op)
    assert seen and seen <= {"-", "*", "/"}


def test_constant_perturbation_stays_positive():
    rng = np.random.default_rng(0)
    for _ in range(100):
        child = mutate(Num(1.0), SMALL, rng, "constant")
        assert isinstance(child, Num) and child.value > 0 and np.isfinite(child.value)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["subtree", "point", "crossover"]))
def test_variation_respects_caps(seed, kind):
    from kindisc.expr import random_tree

    rng = np.random.default_rng(seed)
    cfg = GPConfig(max_complexity=9, max_depth=4, variables=("t", "CA"))
    a = random_tree(rng, cfg.operators, cfg.variables, max_depth=2)
    b = random_tree(rng, cfg.operators, cfg.variables, max_depth=2)
    outs = crossover(a, b, cfg, rng) if kind == "crossover" else (mutate(a, cfg, rng, kind),)
    for out in outs:
        ok = complexity(out) <= cfg.max_complexity and depth(out) <= cfg.max_depth
        assert ok or out in (a, b)
        assert parse(serialize(out), list(cfg.variables)) == out
        assert all(n.op in BINARY_OPS for n in _binops(out))


def _binops(tree):
    from kindisc.expr import walk

    return [n for n in walk(tree) if isinstance(n, BinOp)]
