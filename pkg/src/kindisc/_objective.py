"""Penalized least-squares objective shared by structural search and refinement."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .constraints import ConstraintSpec, PenaltyReport
from .expr import Node, call, compile_tree

BIG = 1e150


class Layout:
    """Data rows and every active constraint grid stacked into one input block.

    The layout is independent of the model, so one instance serves every
    candidate of a structural search; each evaluation is a single call of the
    compiled model.
    """

    def __init__(self, inputs: Mapping[str, np.ndarray], y: np.ndarray, spec: ConstraintSpec | None = None):
        self.y = np.asarray(y, dtype=float).ravel()
        self.n = self.y.size
        self.spec = spec or ConstraintSpec()
        self.entries = self.spec.active()
        self.inputs = {k: np.broadcast_to(np.asarray(v, dtype=float), (self.n,)) for k, v in inputs.items()}

        blocks = [self.inputs] + [e.points() for e in self.entries]
        keys = set(self.inputs)
        self._stacked = all(set(b) == keys for b in blocks) and bool(keys)
        sizes = [self.n] + [len(next(iter(e.points().values()))) for e in self.entries]
        self._bounds = np.cumsum([0] + sizes)
        self._total = int(self._bounds[-1])
        if self._stacked:
            self._all = {k: np.concatenate([b[k] for b in blocks]) for k in keys}
        self._sqrt_w = [np.sqrt(e.weight) for e in self.entries]

    def values(self, fn: Callable, theta) -> np.ndarray:
        if self._stacked:
            out = call(fn, theta, self._all)
            return np.broadcast_to(np.asarray(out, dtype=float), (self._total,))
        parts = [np.broadcast_to(np.asarray(call(fn, theta, self.inputs), dtype=float), (self.n,))]
        for e in self.entries:
            pts = e.points()
            m = len(next(iter(pts.values())))
            parts.append(np.broadcast_to(np.asarray(call(fn, theta, pts), dtype=float), (m,)))
        return np.concatenate(parts)

    def residuals(self, fn: Callable, theta) -> np.ndarray:
        """Data residuals followed by weighted constraint residuals."""
        vals = self.values(fn, theta)
        b = self._bounds
        parts = [vals[: self.n] - self.y]
        for i, e in enumerate(self.entries):
            parts.append(self._sqrt_w[i] * e.violations(vals[b[i + 1]: b[i + 2]]))
        return np.concatenate(parts)

    def objective(self, fn: Callable, theta) -> float:
        r = self.residuals(fn, theta)
        if not np.all(np.isfinite(r)):
            return float("inf")
        with np.errstate(over="ignore"):
            v = float(r @ r)
        return v if np.isfinite(v) else float("inf")

    def sse(self, fn: Callable, theta) -> float:
        vals = self.values(fn, theta)[: self.n]
        if not np.all(np.isfinite(vals)):
            return float("inf")
        d = vals - self.y
        with np.errstate(over="ignore"):
            return float(d @ d)


class PenalizedLeastSquares:
    """``SSE(theta) + sum_j w_j P_j(theta)`` for a static model ``y ~ m(x | theta)``."""

    def __init__(self, tree: Node, inputs: Mapping[str, np.ndarray] | None = None, y=None,
                 spec: ConstraintSpec | None = None, *, layout: Layout | None = None):
        self.tree = tree
        self.fn = compile_tree(tree)
        self.layout = layout if layout is not None else Layout(inputs, y, spec)
        self.spec = self.layout.spec
        self.n = self.layout.n

    def residuals(self, theta) -> np.ndarray:
        return self.layout.residuals(self.fn, theta)

    def objective(self, theta) -> float:
        return self.layout.objective(self.fn, theta)

    def safe_objective(self, theta) -> float:
        v = self.objective(theta)
        return v if v < BIG else BIG

    def sse(self, theta) -> float:
        return self.layout.sse(self.fn, theta)

    def report(self, theta) -> PenaltyReport:
        return self.spec.report(self.fn, np.asarray(theta, dtype=float))
