"""Physical-constraint penalties for candidate models.

Four constraint kinds are supported: initial condition, equilibrium, sign and
monotonicity. Each one is measured as a sum of squared violations, so the
weighted total can also be written as the squared norm of a residual vector
(see :meth:`ConstraintSpec.residuals`); local optimizers use that form.

Penalties are not normalized by grid size; the weights absorb scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .expr import Node, call, compile_tree, variables

__all__ = [
    "KINDS",
    "ConstraintEntry",
    "ConstraintSpec",
    "PenaltyReport",
    "penalty_initial_condition",
    "penalty_equilibrium",
    "penalty_sign",
    "penalty_monotonic",
    "total_penalty",
]

KINDS = ("initial_condition", "equilibrium", "sign", "monotonicity")

Inputs = Mapping[str, np.ndarray]


def _inputs(grid, variable: str) -> dict[str, np.ndarray]:
    if isinstance(grid, Mapping):
        return {k: np.atleast_1d(np.asarray(v, dtype=float)) for k, v in grid.items()}
    return {variable: np.atleast_1d(np.asarray(grid, dtype=float))}


def _grid_length(inputs: Mapping[str, np.ndarray]) -> int:
    lengths = {np.size(v) for v in inputs.values()}
    if len(lengths) != 1:
        raise ValueError(f"grid columns have different lengths: {sorted(lengths)}")
    return lengths.pop()


@dataclass(frozen=True)
class ConstraintEntry:
    """One penalty term.

    ``grid`` is a 1-D array of values of ``variable`` (typically time) or a
    mapping of variable name to equal-length arrays, for models of several
    variables evaluated along a trajectory.
    """

    kind: str
    weight: float = 1.0
    enabled: bool = True
    target: float | None = None
    t0: float = 0.0
    t_a: float = 50.0
    t_b: float = 60.0
    sign: int = 1
    direction: int = -1
    grid: object = None
    variable: str = "t"
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}; expected one of {KINDS}")
        if not np.isfinite(self.weight) or self.weight < 0:
            raise ValueError(f"constraint weight must be finite and >= 0, got {self.weight}")
        if self.kind == "initial_condition":
            if self.target is None or not np.isfinite(self.target):
                raise ValueError("initial_condition constraint needs a finite target")
        elif self.kind == "equilibrium":
            if not self.t_b > self.t_a:
                raise ValueError("equilibrium constraint needs t_b > t_a")
        else:
            if self.grid is None:
                raise ValueError(f"{self.kind} constraint needs an evaluation grid")
            inputs = _inputs(self.grid, self.variable)
            n = _grid_length(inputs)
            if n == 0:
                raise ValueError(f"{self.kind} constraint grid is empty")
            if self.kind == "monotonicity" and n < 2:
                raise ValueError("monotonicity constraint grid needs at least two points")
            if not all(np.all(np.isfinite(v)) for v in inputs.values()):
                raise ValueError(f"{self.kind} constraint grid has non-finite values")
            if not isinstance(self.grid, Mapping) and np.any(np.diff(inputs[self.variable]) <= 0):
                raise ValueError(f"{self.kind} constraint grid must be strictly increasing")
            if self.kind == "sign" and self.sign not in (1, -1):
                raise ValueError("sign must be +1 or -1")
            if self.kind == "monotonicity" and self.direction not in (1, -1):
                raise ValueError("direction must be +1 (increasing) or -1 (decreasing)")

    @property
    def active(self) -> bool:
        return self.enabled and self.weight > 0

    def points(self) -> dict[str, np.ndarray]:
        """Input assignment at which the model is evaluated for this entry."""
        if self.kind == "initial_condition":
            return {self.variable: np.array([self.t0], dtype=float)}
        if self.kind == "equilibrium":
            return {self.variable: np.array([self.t_a, self.t_b], dtype=float)}
        return _inputs(self.grid, self.variable)

    def violations(self, values: np.ndarray) -> np.ndarray:
        """Residual vector from model values at :meth:`points`; ``sum(r**2)`` is the raw penalty."""
        values = np.asarray(values, dtype=float)
        with np.errstate(all="ignore"):
            if self.kind == "initial_condition":
                return values[:1] - self.target
            if self.kind == "equilibrium":
                return values[:1] - values[1:2]
            if self.kind == "sign":
                return np.maximum(0.0, -self.sign * values)
            return np.maximum(0.0, -self.direction * np.diff(values))


@dataclass(frozen=True)
class PenaltyReport:
    raw: tuple[float, ...]
    weights: tuple[float, ...]
    enabled: tuple[bool, ...]
    labels: tuple[str, ...] = ()

    @property
    def total(self) -> float:
        total = 0.0
        for p, w, on in zip(self.raw, self.weights, self.enabled):
            if on and w > 0:
                if not np.isfinite(p):
                    return float("inf")
                total += w * p
        return total

    @property
    def n_violated(self) -> int:
        return sum(1 for p, w, on in zip(self.raw, self.weights, self.enabled) if on and p > 0)

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "raw": list(self.raw),
            "weights": list(self.weights),
            "enabled": list(self.enabled),
            "labels": list(self.labels),
        }


@dataclass(frozen=True)
class ConstraintSpec:
    entries: tuple[ConstraintEntry, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def active(self) -> list[ConstraintEntry]:
        return [e for e in self.entries if e.active]

    def disabled(self) -> "ConstraintSpec":
        """Same entries with every weight zeroed (unconstrained ablation)."""
        return ConstraintSpec(tuple(replace(e, weight=0.0) for e in self.entries))

    def with_entries(self, more: Sequence[ConstraintEntry]) -> "ConstraintSpec":
        return ConstraintSpec(self.entries + tuple(more))

    def report(self, fn: Callable, theta) -> PenaltyReport:
        raw = []
        for e in self.entries:
            raw.append(_raw(e, fn, theta))
        return PenaltyReport(
            tuple(raw),
            tuple(e.weight for e in self.entries),
            tuple(e.enabled for e in self.entries),
            tuple(e.label or e.kind for e in self.entries),
        )

    def residuals(self, fn: Callable, theta) -> np.ndarray:
        """Weighted residuals ``sqrt(w_j) * r_j`` of every active entry, concatenated."""
        parts = []
        for e in self.entries:
            if not e.active:
                continue
            values = np.broadcast_to(call(fn, theta, e.points()), (_grid_length(e.points()),))
            parts.append(np.sqrt(e.weight) * e.violations(values))
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)


def _raw(entry: ConstraintEntry, fn: Callable, theta) -> float:
    pts = entry.points()
    values = np.broadcast_to(np.asarray(call(fn, theta, pts), dtype=float), (_grid_length(pts),))
    if not np.all(np.isfinite(values)):
        return float("inf")
    return float(np.sum(entry.violations(values) ** 2))


def _single(model: Node, theta, entry: ConstraintEntry) -> float:
    return _raw(entry, compile_tree(model), np.asarray(theta, dtype=float))


def _time_var(model: Node) -> str:
    names = variables(model)
    return names[0] if len(names) == 1 else "t"


def penalty_initial_condition(model: Node, theta, t0: float, x0: float) -> float:
    """``(m(t0) - x0)**2``; ``inf`` when the model is not finite at ``t0``."""
    e = ConstraintEntry("initial_condition", t0=t0, target=x0, variable=_time_var(model))
    return _single(model, theta, e)


def penalty_equilibrium(model: Node, theta, t_a: float = 50.0, t_b: float = 60.0) -> float:
    """``(m(t_a) - m(t_b))**2`` for a time surrogate."""
    e = ConstraintEntry("equilibrium", t_a=t_a, t_b=t_b, variable=_time_var(model))
    return _single(model, theta, e)


def penalty_sign(model: Node, theta, grid, s: int) -> float:
    """Squared hinge ``sum(max(0, -s*m(g))**2)`` over the grid."""
    e = ConstraintEntry("sign", grid=grid, sign=int(s), variable=_time_var(model))
    return _single(model, theta, e)


def penalty_monotonic(model: Node, theta, grid, d: int | str) -> float:
    """Squared hinge on successive differences; ``d`` is +1/'increasing' or -1/'decreasing'."""
    if isinstance(d, str):
        d = {"increasing": 1, "decreasing": -1}[d]
    e = ConstraintEntry("monotonicity", grid=grid, direction=int(d), variable=_time_var(model))
    return _single(model, theta, e)


def total_penalty(model: Node, theta, spec: ConstraintSpec) -> PenaltyReport:
    """Weighted penalty report for ``model`` at ``theta`` under ``spec``."""
    return spec.report(compile_tree(model), np.asarray(theta, dtype=float))
