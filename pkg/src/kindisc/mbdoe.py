"""Model-discriminating design of initial conditions.

The next experiment starts from the ``x0`` that maximizes the integrated
squared disagreement between the trajectories of the two best rate models.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.optimize import minimize

from .expr import Node, n_params
from .kinetics import IntegrationError, RateModel

__all__ = ["DesignProblem", "DesignResult", "DesignError", "objective", "design"]


class DesignError(RuntimeError):
    """Every candidate initial condition failed to integrate."""


@dataclass
class DesignProblem:
    """Two fitted rate models and the box of admissible initial conditions.

    Parameters
    ----------
    eta, mu : tuple of (Node, array)
        Rate trees with their fitted parameters.
    include_x0_term : bool
        Add ``sum(x0)`` to the integral, the literal additive form of the
        criterion. Off by default: the term has the wrong units and does not
        measure disagreement.
    """

    eta: tuple[Node, np.ndarray]
    mu: tuple[Node, np.ndarray]
    species: Sequence[str]
    stoichiometry: Sequence[float]
    lower: Sequence[float]
    upper: Sequence[float]
    horizon: tuple[float, float] = (0.0, 10.0)
    n_grid: int = 201
    include_x0_term: bool = False
    lattice_points: int = 5
    n_starts: int = 4
    seed: int = 0

    def __post_init__(self):
        self.species = tuple(self.species)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        n = len(self.species)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bounds need one entry per species")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bounds must not exceed upper bounds")
        if self.n_grid < 16:
            raise ValueError("quadrature grid needs at least 16 points")
        if self.lattice_points < 1 or self.n_starts < 0:
            raise ValueError("lattice_points must be >= 1 and n_starts >= 0")
        self.eta = (self.eta[0], np.asarray(self.eta[1], dtype=float))
        self.mu = (self.mu[0], np.asarray(self.mu[1], dtype=float))
        for tree, theta in (self.eta, self.mu):
            if n_params(tree) != theta.size:
                raise ValueError("parameter vector does not match the model")
        self._models = [RateModel(t, self.species, self.stoichiometry) for t, _ in (self.eta, self.mu)]

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(self.horizon[0], self.horizon[1], self.n_grid)

    def swapped(self) -> "DesignProblem":
        return DesignProblem(self.mu, self.eta, self.species, self.stoichiometry, self.lower, self.upper,
                             self.horizon, self.n_grid, self.include_x0_term, self.lattice_points,
                             self.n_starts, self.seed)

    def trajectories(self, x0) -> tuple[np.ndarray, np.ndarray]:
        grid = self.grid
        (_, te), (_, tm) = self.eta, self.mu
        a = self._models[0].integrate(te, np.atleast_2d(x0), grid)[0]
        b = self._models[1].integrate(tm, np.atleast_2d(x0), grid)[0]
        return a, b


def objective(problem: DesignProblem, x0) -> float:
    """Trapezoid approximation of ``int sum_s (x_eta - x_mu)^2 dt``; ``-inf`` if either model fails."""
    x0 = np.asarray(x0, dtype=float)
    try:
        a, b = problem.trajectories(x0)
    except IntegrationError:
        return float("-inf")
    value = float(trapezoid(np.sum((a - b) ** 2, axis=1), problem.grid))
    if problem.include_x0_term:
        value += float(np.sum(x0))
    return value if np.isfinite(value) else float("-inf")


@dataclass
class DesignResult:
    x0: np.ndarray
    value: float
    landscape: list[tuple[tuple[float, ...], float]] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def landscape_csv(self, species: Sequence[str]) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*species, "objective"])
        for x, v in self.landscape:
            w.writerow([*(repr(float(c)) for c in x), repr(float(v))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "x0": [float(x) for x in self.x0],
            "objective": float(self.value),
            "diagnostics": self.diagnostics,
        }


def _lattice(problem: DesignProblem) -> list[np.ndarray]:
    axes = []
    for lo, hi in zip(problem.lower, problem.upper):
        axes.append(np.array([lo]) if lo == hi else np.linspace(lo, hi, problem.lattice_points))
    return [np.array(p) for p in itertools.product(*axes)]


def design(problem: DesignProblem) -> DesignResult:
    """Maximize :func:`objective` over the bounds.

    A lattice scan (``lattice_points`` per free dimension) seeds
    ``n_starts`` bounded quasi-Newton climbs from the best lattice points;
    the best point found is returned, clipped to the bounds.

    Raises
    ------
    DesignError
        If the objective is ``-inf`` at every evaluated point.
    """
    lo, hi = problem.lower, problem.upper
    if np.all(lo == hi):
        v = objective(problem, lo)
        if not np.isfinite(v):
            raise DesignError("the only admissible initial condition cannot be integrated")
        return DesignResult(lo.copy(), v, [(tuple(lo), v)], {"lattice": 1, "starts": 0})

    landscape = [(tuple(float(c) for c in x), objective(problem, x)) for x in _lattice(problem)]
    order = sorted(range(len(landscape)), key=lambda i: (-landscape[i][1], i))
    best_x = np.array(landscape[order[0]][0])
    best_v = landscape[order[0]][1]

    free = lo < hi
    scale = np.where(free, hi - lo, 1.0)
    bounds = [(0.0, 1.0) if f else (0.0, 0.0) for f in free]

    def neg(u):
        v = objective(problem, lo + u * scale)
        return -v if np.isfinite(v) else 1e12

    climbs = []
    for i in order[: problem.n_starts]:
        if not np.isfinite(landscape[i][1]):
            continue
        u0 = np.where(free, (np.array(landscape[i][0]) - lo) / scale, 0.0)
        res = minimize(neg, u0, method="L-BFGS-B", bounds=bounds, options={"maxiter": 200})
        x = np.clip(lo + np.asarray(res.x) * scale, lo, hi)
        v = objective(problem, x)
        climbs.append({"start": list(landscape[i][0]), "x0": [float(c) for c in x], "objective": v})
        if v > best_v:
            best_x, best_v = x, v
    if not np.isfinite(best_v):
        raise DesignError("objective is -inf at every lattice point")
    diag = {"lattice": len(landscape), "starts": len(climbs), "climbs": climbs}
    return DesignResult(np.clip(best_x, lo, hi), float(best_v), landscape, diag)
