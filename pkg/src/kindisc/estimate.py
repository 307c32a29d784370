"""Parameter refinement, likelihood and AIC-based model selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import least_squares, minimize

from ._io import jsonable
from ._objective import BIG, PenalizedLeastSquares
from .constraints import ConstraintSpec, PenaltyReport
from .expr import Node, complexity, compile_tree, n_params, parse, serialize, variables
from .kinetics import IntegrationError, RateModel
from .simulate import ExperimentDataset

__all__ = [
    "FitResult",
    "OptimizerSettings",
    "SelectionError",
    "nll",
    "aic",
    "fit_surrogate",
    "fit_rate_dynamic",
    "DynamicObjective",
    "select_by_aic",
    "rank_by_aic",
    "multistart",
]

SSE_FLOOR = 1e-12


class SelectionError(RuntimeError):
    """No candidate with a finite AIC."""


def nll(sse: float, n: int) -> float:
    """Gaussian negative log-likelihood with the noise variance profiled out.

    ``NLL = n/2 * (ln(2*pi*SSE/n) + 1)``; ``SSE`` is floored at ``n * 1e-12``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not np.isfinite(sse):
        return float("inf")
    if sse < 0:
        raise ValueError("SSE must be >= 0")
    sse = max(float(sse), n * SSE_FLOOR)
    return 0.5 * n * (math.log(2.0 * math.pi * sse / n) + 1.0)


def aic(nll_value: float, d: int) -> float:
    return 2.0 * nll_value + 2.0 * d


@dataclass(frozen=True)
class OptimizerSettings:
    """Multistart local optimization settings.

    Restart ``0`` starts from the supplied initial point when there is one.
    The remaining starts are drawn log-uniformly in ``positive_range`` for
    parameters whose initial value is positive (or unknown) and uniformly in
    ``signed_range`` otherwise. Start points are drawn in a fixed order, so a
    run with more restarts always contains the starts of a run with fewer.
    """

    n_restarts: int = 10
    method: str = "L-BFGS-B"
    gtol: float = 1e-8
    maxiter: int = 500
    polish: bool = True
    positive_range: tuple[float, float] = (1e-2, 1e2)
    signed_range: tuple[float, float] = (-10.0, 10.0)
    presearch_population: int = 0
    presearch_generations: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if self.method not in ("L-BFGS-B", "trf"):
            raise ValueError("method must be 'L-BFGS-B' or 'trf'")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


DYNAMIC_SETTINGS = OptimizerSettings(presearch_population=8)


@dataclass
class FitResult:
    model: Node
    theta: np.ndarray
    sse: float
    penalty: float
    nll: float
    aic: float
    n_obs: int
    n_params: int
    penalty_report: PenaltyReport | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def complexity(self) -> int:
        return complexity(self.model)

    @property
    def objective(self) -> float:
        return self.sse + self.penalty

    @property
    def failed(self) -> bool:
        return not np.isfinite(self.aic)

    @property
    def expression(self) -> str:
        return serialize(self.model)

    def to_dict(self) -> dict:
        return {
            "model": serialize(self.model),
            "theta": [float(x) for x in self.theta],
            "sse": _num(self.sse),
            "penalty": _num(self.penalty),
            "nll": _num(self.nll),
            "aic": _num(self.aic),
            "n_obs": self.n_obs,
            "n_params": self.n_params,
            "complexity": self.complexity,
            "penalty_report": None if self.penalty_report is None else jsonable(self.penalty_report.to_dict()),
            "diagnostics": jsonable(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitResult":
        rep = d.get("penalty_report")
        report = None
        if rep is not None:
            report = PenaltyReport(tuple(_unnum(x) for x in rep["raw"]), tuple(rep["weights"]),
                                   tuple(rep["enabled"]), tuple(rep.get("labels", ())))
        return cls(
            model=parse(d["model"]),
            theta=np.array(d["theta"], dtype=float),
            sse=_unnum(d["sse"]),
            penalty=_unnum(d["penalty"]),
            nll=_unnum(d["nll"]),
            aic=_unnum(d["aic"]),
            n_obs=int(d["n_obs"]),
            n_params=int(d["n_params"]),
            penalty_report=report,
            diagnostics=dict(d.get("diagnostics", {})),
        )


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else repr(x)


def _unnum(x) -> float:
    return float(x)


def failed_result(tree: Node, n_obs: int, reason: str) -> FitResult:
    d = n_params(tree)
    return FitResult(tree, np.full(d, np.nan), float("inf"), float("inf"), float("inf"),
                     float("inf"), n_obs, d, None, {"failed": reason})


# ---------------------------------------------------------------------------
# multistart

def _random_start(rng: np.random.Generator, signs: np.ndarray, s: OptimizerSettings) -> np.ndarray:
    lo, hi = np.log(s.positive_range[0]), np.log(s.positive_range[1])
    pos = np.exp(rng.uniform(lo, hi, size=signs.size))
    signed = rng.uniform(*s.signed_range, size=signs.size)
    return np.where(signs, pos, signed)


def _presearch(objective: Callable, init: np.ndarray | None, signs: np.ndarray,
               s: OptimizerSettings, rng: np.random.Generator) -> list[np.ndarray]:
    """Small (mu + lambda) evolution strategy used to seed local restarts."""
    pop = [] if init is None else [init.copy()]
    while len(pop) < s.presearch_population:
        pop.append(_random_start(rng, signs, s))
    scores = [objective(x) for x in pop]
    step = 0.5
    for _ in range(s.presearch_generations):
        children = []
        for x in pop:
            noise = rng.normal(0.0, step, size=x.size)
            child = np.where(signs, x * np.exp(noise), x + noise * np.maximum(np.abs(x), 1.0))
            children.append(child)
        child_scores = [objective(x) for x in children]
        merged = sorted(zip(scores + child_scores, range(2 * len(pop)), pop + children),
                        key=lambda z: (z[0], z[1]))
        scores = [z[0] for z in merged[: len(pop)]]
        pop = [z[2] for z in merged[: len(pop)]]
        step *= 0.9
    return pop


def multistart(objective: Callable[[np.ndarray], float], residuals: Callable[[np.ndarray], np.ndarray] | None,
               d: int, settings: OptimizerSettings, init=None) -> tuple[np.ndarray, float, dict]:
    """Best local minimum over several starts.

    ``objective`` must return ``inf`` for infeasible points; ``residuals``
    (optional) is used by the least-squares polish and by the ``trf`` method.
    Returns ``(theta, objective_value, diagnostics)``.
    """
    rng = np.random.default_rng(settings.seed)
    init = None if init is None else np.asarray(init, dtype=float)
    if init is not None and not np.all(np.isfinite(init)):
        init = None
    signs = np.ones(d, dtype=bool) if init is None else (init > 0)

    def safe(x):
        v = objective(x)
        return v if np.isfinite(v) and v < BIG else BIG

    starts: list[np.ndarray] = []
    if init is not None:
        starts.append(init)
    if settings.presearch_population > 0:
        for x in _presearch(objective, init, signs, settings, rng):
            if len(starts) >= settings.n_restarts:
                break
            if not any(np.array_equal(x, y) for y in starts):
                starts.append(x)
    while len(starts) < settings.n_restarts:
        starts.append(_random_start(rng, signs, settings))

    endpoints, values, converged, polished = [], [], [], []
    for x0 in starts:
        x, v, ok, pol = _local(objective, safe, residuals, x0, d, settings)
        endpoints.append(x)
        values.append(v)
        converged.append(ok)
        polished.append(pol)

    best = int(np.argmin(values))
    theta, value = endpoints[best], values[best]
    diag = {
        "restarts": len(starts),
        "best_restart": best,
        "converged": bool(converged[best]),
        "polished": bool(polished[best]),
        "restart_objectives": [float(v) for v in values],
        "method": settings.method,
    }
    return theta, value, diag


def _local(objective, safe, residuals, x0, d, settings):
    """One restart: quasi-Newton (or trust-region) descent, then a least-squares polish.

    Each restart's endpoint depends only on its start, which keeps the best
    objective monotone in the number of restarts.
    """
    if not np.isfinite(objective(x0)):
        return x0, float("inf"), False, False
    if settings.method == "trf" and residuals is not None:
        try:
            res = least_squares(_safe_residuals(residuals), x0, method="trf", x_scale="jac",
                                max_nfev=settings.maxiter, gtol=settings.gtol)
        except (ValueError, np.linalg.LinAlgError):
            return x0, objective(x0), False, False
        ok = res.status > 0
    else:
        res = minimize(safe, x0, method="L-BFGS-B",
                       options={"gtol": settings.gtol, "maxiter": settings.maxiter})
        ok = bool(res.success)
    x = np.asarray(res.x, dtype=float)
    v = objective(x)
    v = v if np.isfinite(v) else float("inf")
    pol = False
    if settings.polish and residuals is not None and np.isfinite(v):
        try:
            res = least_squares(_safe_residuals(residuals), x, method="trf", x_scale="jac",
                                xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=50 * (d + 1))
            vp = objective(res.x)
            if np.isfinite(vp) and vp < v:
                x, v, pol = np.asarray(res.x, dtype=float), vp, True
        except (ValueError, np.linalg.LinAlgError):
            pass
    return x, v, ok, pol


def _safe_residuals(residuals: Callable) -> Callable:
    """Wrap ``residuals`` so failures map to a large finite vector of the last good size."""
    size = [None]

    def f(x):
        r = residuals(x)
        if r is None:
            if size[0] is None:
                raise ValueError("residuals undefined at the starting point")
            return np.full(size[0], 1e10)
        size[0] = r.size
        bad = ~np.isfinite(r)
        if bad.any():
            r = np.where(bad, 1e10, r)
        return np.clip(r, -1e10, 1e10)

    return f


# ---------------------------------------------------------------------------
# concentration surrogates

def fit_surrogate(tree: Node, t, c, spec: ConstraintSpec | None = None,
                  settings: OptimizerSettings | None = None, init=None, variable: str = "t") -> FitResult:
    """Fit a time surrogate ``c(t) ~ tree(t | theta)`` minimizing SSE plus penalties.

    Returns a :class:`FitResult` whose ``theta`` attains the lowest objective
    over all restarts; a failed fit carries an infinite AIC.
    """
    t = np.asarray(t, dtype=float).ravel()
    c = np.asarray(c, dtype=float).ravel()
    if t.size == 0 or t.size != c.size:
        raise ValueError("t and c must be non-empty and of equal length")
    extra = set(variables(tree)) - {variable}
    if extra:
        raise ValueError(f"surrogate may only depend on {variable!r}, got {sorted(extra)}")
    settings = settings or OptimizerSettings()
    problem = PenalizedLeastSquares(tree, {variable: t}, c, spec)
    return _fit_static(problem, tree, settings, init)


def _fit_static(problem: PenalizedLeastSquares, tree: Node, settings: OptimizerSettings, init) -> FitResult:
    d = n_params(tree)
    n = problem.n
    if d == 0:
        theta, diag = np.zeros(0), {"restarts": 0, "best_restart": 0, "converged": True}
    else:
        theta, value, diag = multistart(problem.objective, problem.residuals, d, settings, init)
        if not np.isfinite(value):
            return failed_result(tree, n, "no restart reached a finite objective")
    sse = problem.sse(theta)
    report = problem.report(theta)
    if not np.isfinite(sse):
        return failed_result(tree, n, "model not finite at the data")
    nl = nll(sse, n)
    return FitResult(tree, theta, sse, report.total, nl, aic(nl, d), n, d, report, diag)


def fit_static(tree: Node, inputs: Mapping[str, np.ndarray], y, spec: ConstraintSpec | None = None,
               settings: OptimizerSettings | None = None, init=None) -> FitResult:
    """Fit ``y ~ tree(inputs | theta)`` (the rate-space counterpart of :func:`fit_surrogate`)."""
    problem = PenalizedLeastSquares(tree, inputs, np.asarray(y, dtype=float), spec)
    return _fit_static(problem, tree, settings or OptimizerSettings(), init)


# ---------------------------------------------------------------------------
# dynamic estimation of rate laws

class DynamicObjective:
    """Concentration-space SSE of a rate law integrated from each experiment's ``x0``."""

    def __init__(self, tree: Node, experiments: Sequence[ExperimentDataset],
                 stoichiometry: Sequence[float], spec: ConstraintSpec | None = None,
                 rtol: float = 1e-8, atol: float = 1e-10):
        if not experiments:
            raise ValueError("dynamic estimation needs at least one experiment")
        species = experiments[0].species
        if any(e.species != species for e in experiments):
            raise ValueError("all experiments must share the species order")
        extra = set(variables(tree)) - set(species)
        if extra:
            raise ValueError(f"rate model references unknown species {sorted(extra)}")
        self.tree = tree
        self.model = RateModel(tree, species, stoichiometry)
        self.spec = spec or ConstraintSpec()
        self.rtol, self.atol = rtol, atol
        groups: dict[bytes, list[ExperimentDataset]] = {}
        for e in experiments:
            groups.setdefault(e.times.tobytes(), []).append(e)
        self.groups = [
            (g[0].times, np.array([e.x0 for e in g]), np.array([e.values for e in g]))
            for g in groups.values()
        ]
        self.n = sum(v.size for _, _, v in self.groups)

    def predictions(self, theta) -> list[np.ndarray] | None:
        out = []
        for times, x0s, _ in self.groups:
            try:
                out.append(self.model.integrate(theta, x0s, times, rtol=self.rtol, atol=self.atol))
            except IntegrationError:
                return None
        return out

    def data_residuals(self, theta) -> np.ndarray | None:
        preds = self.predictions(theta)
        if preds is None:
            return None
        return np.concatenate([(p - v).ravel() for p, (_, _, v) in zip(preds, self.groups)])

    def residuals(self, theta) -> np.ndarray | None:
        r = self.data_residuals(theta)
        if r is None:
            return None
        pen = self.spec.residuals(self.model.fn, np.asarray(theta, dtype=float))
        return np.concatenate([r, pen]) if pen.size else r

    def sse(self, theta) -> float:
        r = self.data_residuals(theta)
        return float("inf") if r is None else float(r @ r)

    def objective(self, theta) -> float:
        r = self.residuals(theta)
        if r is None or not np.all(np.isfinite(r)):
            return float("inf")
        with np.errstate(over="ignore"):
            return float(r @ r)


def fit_rate_dynamic(tree: Node, experiments: Sequence[ExperimentDataset], stoichiometry: Sequence[float],
                     spec: ConstraintSpec | None = None, settings: OptimizerSettings | None = None,
                     init=None) -> FitResult:
    """Estimate rate-law parameters by integrating the model against measured concentrations.

    Raises
    ------
    ValueError
        If ``experiments`` is empty or the model uses unknown species.
    """
    settings = settings or DYNAMIC_SETTINGS
    obj = DynamicObjective(tree, experiments, stoichiometry, spec)
    d = n_params(tree)
    if d == 0:
        theta, diag = np.zeros(0), {"restarts": 0, "best_restart": 0, "converged": True}
        if not np.isfinite(obj.objective(theta)):
            return failed_result(tree, obj.n, "integration failed")
    else:
        theta, value, diag = multistart(obj.objective, obj.residuals, d, settings, init)
        if not np.isfinite(value):
            return failed_result(tree, obj.n, "integration failed at every restart")
    sse = obj.sse(theta)
    report = obj.spec.report(obj.model.fn, theta)
    nl = nll(sse, obj.n)
    return FitResult(tree, theta, sse, report.total, nl, aic(nl, d), obj.n, d, report, diag)


# ---------------------------------------------------------------------------
# selection

def _aic_key(r: FitResult):
    # sse and theta only separate copies of one structure, keeping the order total
    return (r.aic, r.complexity, serialize(r.model), r.sse, tuple(float(x) for x in r.theta))


def rank_by_aic(candidates: Sequence[FitResult]) -> list[FitResult]:
    """Finite-AIC candidates, best first; ties go to lower complexity, then text order, then SSE."""
    return sorted((c for c in candidates if np.isfinite(c.aic)), key=_aic_key)


def select_by_aic(candidates: Sequence[FitResult]) -> FitResult:
    ranked = rank_by_aic(candidates)
    if not ranked:
        raise SelectionError("no candidate has a finite AIC")
    return ranked[0]
