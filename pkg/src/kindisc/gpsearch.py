"""Level-wise genetic-programming search over expression structures.

Candidates carry literal constants. Every new structure receives a short
damped Gauss-Newton tune of its constants before its fitness
``SSE + sum_j w_j P_j`` is recorded; tuned constants are written back into
the individual. The best candidate seen at each complexity level is kept in
a :class:`ChampionTable`, and the champions are re-injected into every
generation so that small levels are not crowded out by larger trees.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, fields, replace
from typing import Iterator, Mapping, Sequence

import numpy as np

from ._io import jsonable
from ._objective import Layout
from .constraints import ConstraintSpec, PenaltyReport
from .expr import (
    BINARY_OPS,
    UNARY_OPS,
    BinOp,
    Exp,
    Node,
    Num,
    Var,
    bind,
    compile_tree,
    complexity,
    depth,
    parametrize,
    parse,
    random_tree,
    replace_subtree,
    serialize,
    subtrees,
)

__all__ = [
    "GPConfig",
    "Champion",
    "ChampionTable",
    "search",
    "mutate",
    "crossover",
    "tune_constants",
]


@dataclass(frozen=True)
class GPConfig:
    """Structural search settings.

    ``tune_iterations`` bounds the Gauss-Newton steps spent on a new
    structure's constants and ``tune_restarts`` how many distinct constant
    sets a structure is tuned from before later copies reuse the best.
    """

    population_size: int = 500
    generations: int = 40
    tournament_size: int = 5
    p_crossover: float = 0.7
    p_subtree: float = 0.2
    p_point: float = 0.1
    max_complexity: int = 15
    max_depth: int = 8
    operators: tuple[str, ...] = ("+", "-", "*", "/", "exp")
    variables: tuple[str, ...] = ("t",)
    const_range: tuple[float, float] = (-5.0, 5.0)
    seed: int = 0
    tune_iterations: int = 10
    tune_restarts: int = 2
    init_depth: tuple[int, int] = (2, 4)

    def __post_init__(self):
        object.__setattr__(self, "operators", tuple(self.operators))
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "const_range", tuple(float(x) for x in self.const_range))
        object.__setattr__(self, "init_depth", tuple(int(x) for x in self.init_depth))
        for name in ("p_crossover", "p_subtree", "p_point"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.p_crossover + self.p_subtree + self.p_point > 1.0 + 1e-12:
            raise ValueError("variation probabilities must sum to at most 1")
        if self.max_complexity < 3:
            raise ValueError("max_complexity must be >= 3")
        if self.tournament_size < 1:
            raise ValueError("tournament_size must be >= 1")
        if self.population_size < 2 * self.tournament_size:
            raise ValueError("population_size must be at least twice tournament_size")
        if self.generations < 0 or self.max_depth < 1:
            raise ValueError("generations must be >= 0 and max_depth >= 1")
        bad = [op for op in self.operators if op not in BINARY_OPS + UNARY_OPS]
        if bad:
            raise ValueError(f"unsupported operators {bad}")
        if self.const_range[0] >= self.const_range[1]:
            raise ValueError("const_range must be increasing")

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "GPConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown GPConfig fields {sorted(unknown)}")
        return cls(**dict(d))

    def with_(self, **changes) -> "GPConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class Champion:
    """Best candidate at one complexity level, with parameter slots ``p1..pd``."""

    tree: Node
    theta: np.ndarray
    fitness: float
    sse: float
    report: PenaltyReport | None = None

    @property
    def complexity(self) -> int:
        return complexity(self.tree)

    @property
    def penalty(self) -> float:
        return self.fitness - self.sse

    @property
    def expression(self) -> str:
        return serialize(self.tree)

    def bound(self) -> Node:
        return bind(self.tree, self.theta)

    def to_dict(self) -> dict:
        return {
            "complexity": self.complexity,
            "model": serialize(self.tree),
            "theta": [float(x) for x in self.theta],
            "fitness": float(self.fitness),
            "sse": float(self.sse),
            "penalty_report": None if self.report is None else jsonable(self.report.to_dict()),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Champion":
        rep = d.get("penalty_report")
        report = None if rep is None else PenaltyReport(
            tuple(float(x) for x in rep["raw"]), tuple(rep["weights"]), tuple(rep["enabled"]),
            tuple(rep.get("labels", ())))
        return cls(parse(d["model"]), np.array(d["theta"], dtype=float), float(d["fitness"]),
                   float(d["sse"]), report)


@dataclass
class ChampionTable:
    """Map from complexity ``kappa`` to the best :class:`Champion` seen at that level."""

    entries: dict[int, Champion] = field(default_factory=dict)
    trace: list[dict] = field(default_factory=list)
    diagnostic: str = ""
    evaluations: int = 0

    def offer(self, champ: Champion) -> bool:
        """Store ``champ`` if it beats the incumbent at its level; ties keep the incumbent."""
        k = champ.complexity
        cur = self.entries.get(k)
        if cur is None or champ.fitness < cur.fitness:
            self.entries[k] = champ
            return True
        return False

    def __getitem__(self, kappa: int) -> Champion:
        return self.entries[kappa]

    def __contains__(self, kappa) -> bool:
        return kappa in self.entries

    def __iter__(self) -> Iterator[int]:
        return iter(sorted(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def items(self):
        return [(k, self.entries[k]) for k in sorted(self.entries)]

    def champions(self) -> list[Champion]:
        return [self.entries[k] for k in sorted(self.entries)]

    def best(self) -> Champion:
        if not self.entries:
            raise ValueError("champion table is empty")
        return min(self.champions(), key=lambda c: (c.fitness, c.complexity))

    def to_dict(self) -> dict:
        return {
            "champions": [c.to_dict() for c in self.champions()],
            "diagnostic": self.diagnostic,
            "evaluations": self.evaluations,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChampionTable":
        t = cls(diagnostic=d.get("diagnostic", ""), evaluations=int(d.get("evaluations", 0)))
        for c in d.get("champions", []):
            t.entries[int(c["complexity"])] = Champion.from_dict(c)
        return t

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["generation", "complexity", "best_fitness"])
        for row in self.trace:
            w.writerow([row["generation"], row["complexity"], repr(float(row["best_fitness"]))])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# constant tuning

@np.errstate(all="ignore")
def tune_constants(layout: Layout, fn, theta: np.ndarray, iterations: int) -> tuple[np.ndarray, float]:
    """A few Levenberg-Marquardt steps with a forward-difference Jacobian."""
    theta = np.asarray(theta, dtype=float).copy()
    r = layout.residuals(fn, theta)
    if not np.all(np.isfinite(r)):
        return theta, float("inf")
    f = float(r @ r)
    if theta.size == 0 or not np.isfinite(f):
        return theta, f if np.isfinite(f) else float("inf")
    lam = 1e-2
    d = theta.size
    J = np.empty((r.size, d))
    for _ in range(iterations):
        for j in range(d):
            h = 1e-7 * max(1.0, abs(theta[j]))
            tp = theta.copy()
            tp[j] += h
            J[:, j] = (layout.residuals(fn, tp) - r) / h
        if not np.all(np.isfinite(J)):
            break
        A = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(4):
            try:
                step = np.linalg.solve(A + lam * (np.diag(np.diag(A)) + 1e-12 * np.eye(d)), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = theta + step
            rc = layout.residuals(fn, cand)
            if np.all(np.isfinite(rc)):
                fc = float(rc @ rc)
                if fc < f:
                    theta, r, f = cand, rc, fc
                    lam = max(lam / 3.0, 1e-12)
                    improved = True
                    break
            lam *= 4.0
        if not improved or f <= 1e-30:
            break
    return theta, f


# ---------------------------------------------------------------------------
# variation operators

def _fits(tree: Node, cfg: GPConfig) -> bool:
    return complexity(tree) <= cfg.max_complexity and depth(tree) <= cfg.max_depth


def crossover(a: Node, b: Node, cfg: GPConfig, rng: np.random.Generator, attempts: int = 8) -> tuple[Node, Node]:
    """Exchange random subtrees; parents are returned unchanged if no valid swap is found."""
    sa, sb = subtrees(a), subtrees(b)
    for _ in range(attempts):
        i, j = int(rng.integers(len(sa))), int(rng.integers(len(sb)))
        ca = replace_subtree(a, i, sb[j])
        cb = replace_subtree(b, j, sa[i])
        if _fits(ca, cfg) and _fits(cb, cfg):
            return ca, cb
    return a, b


def _perturb(value: float, rng: np.random.Generator) -> float:
    out = value * float(np.exp(rng.normal(0.0, 0.3)))
    return out if np.isfinite(out) else value


def mutate(tree: Node, cfg: GPConfig, rng: np.random.Generator, kind: str = "subtree",
           attempts: int = 8) -> Node:
    """Apply one mutation.

    ``kind`` is ``"subtree"`` (replace a random subtree by a fresh random one),
    ``"point"`` (swap a binary operator, a variable, or perturb a constant) or
    ``"constant"`` (multiplicative log-normal perturbation of one constant).
    If no valid offspring is found within ``attempts`` the parent is returned.
    """
    nodes = subtrees(tree)
    binary = [op for op in cfg.operators if op in BINARY_OPS]
    for _ in range(attempts):
        if kind == "constant":
            idx = [i for i, n in enumerate(nodes) if isinstance(n, Num)]
            if not idx:
                return tree
            i = idx[int(rng.integers(len(idx)))]
            return replace_subtree(tree, i, Num(_perturb(nodes[i].value, rng)))
        i = int(rng.integers(len(nodes)))
        node = nodes[i]
        if kind == "subtree":
            new = random_tree(rng, cfg.operators, cfg.variables, max_depth=int(rng.integers(1, 4)),
                              method="grow", const_range=cfg.const_range)
        elif kind == "point":
            if isinstance(node, BinOp):
                choices = [op for op in binary if op != node.op]
                if not choices:
                    continue
                new = BinOp(choices[int(rng.integers(len(choices)))], node.left, node.right)
            elif isinstance(node, Num):
                new = Num(_perturb(node.value, rng))
            elif isinstance(node, Var):
                others = [v for v in cfg.variables if v != node.name]
                if not others:
                    continue
                new = Var(others[int(rng.integers(len(others)))])
            else:
                continue
        else:
            raise ValueError(f"unknown mutation kind {kind!r}")
        child = replace_subtree(tree, i, new)
        if _fits(child, cfg):
            return child
    return tree


# ---------------------------------------------------------------------------
# search

@dataclass
class _CacheEntry:
    theta: np.ndarray
    fitness: float
    tunes: int


class _Engine:
    def __init__(self, layout: Layout, cfg: GPConfig, table: ChampionTable):
        self.layout = layout
        self.cfg = cfg
        self.table = table
        self.cache: dict[str, _CacheEntry] = {}

    def evaluate(self, tree: Node) -> tuple[Node, float]:
        """Fitness of ``tree`` after tuning; returns the individual with tuned constants."""
        ptree, theta0 = parametrize(tree)
        key = serialize(ptree)
        fn = compile_tree(ptree)
        self.table.evaluations += 1
        entry = self.cache.get(key)
        if entry is not None and entry.tunes >= self.cfg.tune_restarts:
            theta, f = entry.theta, entry.fitness
        else:
            theta, f = tune_constants(self.layout, fn, theta0, self.cfg.tune_iterations)
            if entry is None:
                entry = self.cache[key] = _CacheEntry(theta, f, 1)
                self._offer(ptree, fn, theta, f)
            else:
                entry.tunes += 1
                if f < entry.fitness:
                    entry.theta, entry.fitness = theta, f
                    self._offer(ptree, fn, theta, f)
                else:
                    theta, f = entry.theta, entry.fitness
        if not np.isfinite(f):
            return tree, float("inf")
        return bind(ptree, theta), f

    def _offer(self, ptree: Node, fn, theta: np.ndarray, f: float) -> None:
        if not np.isfinite(f):
            return
        k = complexity(ptree)
        cur = self.table.entries.get(k)
        if cur is not None and not f < cur.fitness:
            return
        sse = self.layout.sse(fn, theta)
        report = self.layout.spec.report(fn, theta) if self.layout.entries else None
        self.table.offer(Champion(ptree, theta.copy(), f, sse, report))


def _as_inputs(X, names: Sequence[str]) -> dict[str, np.ndarray]:
    if isinstance(X, Mapping):
        missing = [v for v in names if v not in X]
        if missing:
            raise ValueError(f"inputs missing variables {missing}")
        return {v: np.asarray(X[v], dtype=float).ravel() for v in names}
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != len(names):
        raise ValueError(f"expected {len(names)} input columns, got {X.shape[1]}")
    return {v: X[:, j] for j, v in enumerate(names)}


def _tournament(fitness: np.ndarray, k: int, rng: np.random.Generator) -> int:
    idx = rng.integers(len(fitness), size=k)
    return int(idx[np.argmin(fitness[idx])])


def _initial_population(cfg: GPConfig, rng: np.random.Generator, y: np.ndarray) -> list[Node]:
    pop: list[Node] = [Num(float(np.mean(y)) if y.size else 1.0)]
    pop += [Var(v) for v in cfg.variables]
    lo, hi = cfg.init_depth
    depths = list(range(max(lo, 1), max(hi, lo) + 1))
    i = 0
    while len(pop) < cfg.population_size:
        d = depths[i % len(depths)]
        method = "full" if (i // len(depths)) % 2 else "grow"
        i += 1
        for _ in range(20):
            tree = random_tree(rng, cfg.operators, cfg.variables, max_depth=d, method=method,
                               const_range=cfg.const_range)
            if _fits(tree, cfg):
                break
        else:
            tree = Var(cfg.variables[0])
        pop.append(tree)
    return pop[: cfg.population_size]


def search(X, y, spec: ConstraintSpec | None = None, cfg: GPConfig | None = None) -> ChampionTable:
    """Run the structural search and return the champion of every complexity level.

    Parameters
    ----------
    X : mapping or array
        Inputs keyed by ``cfg.variables`` (or columns in that order).
    y : array
        Targets.
    spec : ConstraintSpec, optional
        Physical constraints added to the fitness.
    cfg : GPConfig, optional

    Returns
    -------
    ChampionTable
        Empty, with ``diagnostic`` set, if no candidate had a finite fitness.
    """
    cfg = cfg or GPConfig()
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise ValueError("search needs a non-empty dataset")
    inputs = _as_inputs(X, cfg.variables)
    layout = Layout(inputs, y, spec)
    rng = np.random.default_rng(cfg.seed)
    table = ChampionTable()
    engine = _Engine(layout, cfg, table)

    pop, fit = [], []
    for tree in _initial_population(cfg, rng, y):
        t, f = engine.evaluate(tree)
        pop.append(t)
        fit.append(f)
    _record(table, 0)

    p1 = cfg.p_crossover
    p2 = p1 + cfg.p_subtree
    p3 = p2 + cfg.p_point
    for gen in range(1, cfg.generations + 1):
        fitness = np.array(fit)
        elites = [c.bound() for c in table.champions()]
        new_pop: list[Node] = list(elites[: cfg.population_size])
        while len(new_pop) < cfg.population_size:
            u = rng.random()
            a = pop[_tournament(fitness, cfg.tournament_size, rng)]
            if u < p1:
                b = pop[_tournament(fitness, cfg.tournament_size, rng)]
                ca, cb = crossover(a, b, cfg, rng)
                new_pop.append(ca)
                if len(new_pop) < cfg.population_size:
                    new_pop.append(cb)
            elif u < p2:
                new_pop.append(mutate(a, cfg, rng, "subtree"))
            elif u < p3:
                new_pop.append(mutate(a, cfg, rng, "point"))
            else:
                new_pop.append(a)
        pop, fit = [], []
        for tree in new_pop:
            t, f = engine.evaluate(tree)
            pop.append(t)
            fit.append(f)
        _record(table, gen)

    if not table.entries:
        table.diagnostic = "no candidate reached a finite fitness; check the data and the operator set"
    return table


def _record(table: ChampionTable, generation: int) -> None:
    for k, c in table.items():
        table.trace.append({"generation": generation, "complexity": k, "best_fitness": c.fitness})
