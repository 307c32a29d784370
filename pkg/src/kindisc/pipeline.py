"""Strong-formulation discovery loop.

One round fits a symbolic time surrogate to every measured series, turns
the surrogates' derivatives into rate estimates, searches rate laws on the
pooled estimates, refits the rate champions against the raw concentrations
and ranks them by AIC. While the stop predicate fails and the experiment
budget allows, a discriminating experiment is designed between the two best
rate laws and the loop repeats.

Every completed round is persisted under ``<run_dir>/round_<k>/`` with a
``complete`` marker written last, so an interrupted run resumes from the
last complete round and reproduces the remaining rounds exactly.
"""

from __future__ import annotations

import csv
import io
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _io
from .config import ConstraintTemplate, RunConfig
from .constraints import ConstraintEntry, ConstraintSpec, PenaltyReport
from .estimate import FitResult, fit_rate_dynamic, fit_surrogate, rank_by_aic
from .expr import (
    Node,
    bind,
    call,
    canonical_form,
    compile_tree,
    differentiate,
    serialize,
    structurally_equal,
)
from .gpsearch import ChampionTable, search
from .mbdoe import DesignError, DesignProblem, design
from .simulate import (
    ExperimentDataset,
    datasets_to_csv,
    experiment_seed,
    read_datasets_csv,
    run_designed,
    run_experiment,
)

__all__ = [
    "PipelineError",
    "derive_seed",
    "concentration_spec",
    "rate_spec",
    "SeriesSurrogate",
    "fit_series",
    "build_surrogates",
    "RateDataset",
    "estimate_rates",
    "RoundRecord",
    "DiscoveryState",
    "run_round",
    "discover",
    "load_state",
    "initial_experiments",
]

log = logging.getLogger(__name__)

# seed stream tags
_SURROGATE, _RATE_GP, _RATE_FIT, _DESIGN = 1, 2, 3, 4

SATISFIED = "satisfied"
BUDGET_EXHAUSTED = "budget_exhausted"


class PipelineError(RuntimeError):
    """A discovery step failed; the message names the round and series involved."""


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of non-negative integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# constraint instantiation

def _sign(x: float) -> int:
    return int(np.sign(x)) if np.isfinite(x) else 0


def concentration_spec(experiment: ExperimentDataset, species: str,
                       templates: Sequence[ConstraintTemplate], constraints_off: bool = False) -> ConstraintSpec:
    """Instantiate concentration-phase templates for one measured series.

    The initial condition targets the experiment's known ``x0``. Sign
    defaults to non-negative. The monotone direction follows the measured
    trend (mean of the last three points against ``x0``) and the entry is
    skipped when the trend is exactly flat.
    """
    j = experiment.species.index(species)
    t = experiment.times
    x0 = float(experiment.x0[j])
    tag = f"E{experiment.experiment_id}:{species}"
    entries = []
    for tp in templates:
        if tp.species is not None and species not in tp.species:
            continue
        common = dict(weight=tp.weight, enabled=tp.enabled, label=f"{tag}:{tp.kind}")
        if tp.kind == "initial_condition":
            entries.append(ConstraintEntry("initial_condition", target=x0, t0=float(t[0]), **common))
        elif tp.kind == "equilibrium":
            entries.append(ConstraintEntry("equilibrium", t_a=tp.t_a, t_b=tp.t_b, **common))
        elif tp.kind == "sign":
            entries.append(ConstraintEntry("sign", sign=tp.sign or 1, grid=t, **common))
        elif tp.kind == "monotonicity":
            d = tp.direction or _sign(float(np.mean(experiment.values[-3:, j])) - x0)
            if d:
                entries.append(ConstraintEntry("monotonicity", direction=d, grid=t, **common))
    spec = ConstraintSpec(tuple(entries))
    return spec.disabled() if constraints_off else spec


def rate_spec(rates: "RateDataset", templates: Sequence[ConstraintTemplate],
              constraints_off: bool = False) -> ConstraintSpec:
    """Instantiate rate-phase templates along every experiment's surrogate trajectory.

    The sign of the rate defaults to the sign of the median estimate pooled
    over all experiments, so one reaction direction applies everywhere,
    including experiments where nothing reacts. Its magnitude is required to
    decay in time. A zero pooled median disables sign-dependent entries.
    """
    entries = []
    finite = rates.rate[np.isfinite(rates.rate)]
    s_hat = _sign(float(np.median(finite))) if finite.size else 0
    for eid, (times, states) in sorted(rates.trajectories.items()):
        ok = np.all(np.isfinite(states), axis=1)
        if ok.sum() < 2:
            continue
        grid = {s: states[ok, j] for j, s in enumerate(rates.species)}
        for tp in templates:
            sign = tp.sign or s_hat
            if not sign:
                continue
            common = dict(weight=tp.weight, enabled=tp.enabled, grid=grid, label=f"E{eid}:rate:{tp.kind}")
            if tp.kind == "sign":
                entries.append(ConstraintEntry("sign", sign=sign, **common))
            elif tp.kind == "monotonicity":
                entries.append(ConstraintEntry("monotonicity", direction=tp.direction or -sign, **common))
    spec = ConstraintSpec(tuple(entries))
    return spec.disabled() if constraints_off else spec


def _violates(report: PenaltyReport | None, tol: float) -> bool:
    """Any enabled entry whose raw penalty exceeds ``tol``, whatever its weight."""
    if report is None:
        return False
    return any(on and not p <= tol for p, on in zip(report.raw, report.enabled))


# ---------------------------------------------------------------------------
# surrogates

@dataclass
class SeriesSurrogate:
    """The AIC-selected time model of one (experiment, species) series."""

    experiment_id: int
    species: str
    fit: FitResult
    seed: int
    candidates: list[dict] = field(default_factory=list)

    @property
    def id(self) -> str:
        return f"E{self.experiment_id}:{self.species}"

    @property
    def model(self) -> Node:
        return self.fit.model

    @property
    def theta(self) -> np.ndarray:
        return self.fit.theta

    def value(self, t) -> np.ndarray:
        return self._eval(self.model, t)

    def derivative(self, t) -> np.ndarray:
        # the derivative may drop the last slot, so bypass evaluate's length check
        return self._eval(differentiate(self.model, "t"), t)

    def _eval(self, tree: Node, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = call(compile_tree(tree), np.asarray(self.theta, dtype=float), {"t": t})
        return np.broadcast_to(np.asarray(out, dtype=float), t.shape).copy()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "experiment_id": self.experiment_id,
            "species": self.species,
            "seed": self.seed,
            "expression": serialize(bind(self.model, self.theta)),
            "fit": self.fit.to_dict(),
            "candidates": _io.jsonable(self.candidates),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SeriesSurrogate":
        return cls(int(d["experiment_id"]), d["species"], FitResult.from_dict(d["fit"]), int(d["seed"]),
                   list(d.get("candidates", [])))


def _refine_pool(table: ChampionTable, max_refine: int | None):
    champs = table.champions()
    if max_refine is not None and len(champs) > max_refine:
        keep = sorted(champs, key=lambda c: (c.fitness, c.complexity))[:max_refine]
        champs = sorted(keep, key=lambda c: c.complexity)
    return champs


def _summary(f: FitResult) -> dict:
    return {"model": f.expression, "complexity": f.complexity, "aic": f.aic, "sse": f.sse, "penalty": f.penalty}


def fit_series(experiment: ExperimentDataset, species: str, cfg: RunConfig) -> SeriesSurrogate:
    """GP search, refinement of every champion, and AIC selection for one series.

    Raises
    ------
    PipelineError
        If the search finds nothing or no refined candidate has a finite AIC.
    """
    phase = cfg.concentration
    j = experiment.species.index(species)
    seed = derive_seed(cfg.seeds.gp_seed, _SURROGATE, experiment.experiment_id, j)
    t, y = experiment.times, experiment.values[:, j]
    spec = concentration_spec(experiment, species, phase.constraints, cfg.constraints_off)
    label = f"experiment {experiment.experiment_id}, species {species}"
    table = search({"t": t}, y, spec, phase.gp.with_(seed=seed, variables=("t",)))
    if not len(table):
        raise PipelineError(f"surrogate search failed for {label}: {table.diagnostic}")
    settings = replace(phase.optimizer, seed=seed)
    fits = [fit_surrogate(c.tree, t, y, spec, settings, init=c.theta) for c in _refine_pool(table, phase.max_refine)]
    ranked = rank_by_aic(fits)
    if not ranked:
        raise PipelineError(f"surrogate selection failed for {label}: no candidate has a finite AIC")
    return SeriesSurrogate(experiment.experiment_id, species, ranked[0], seed, [_summary(f) for f in ranked])


def build_surrogates(experiments: Sequence[ExperimentDataset], cfg: RunConfig,
                     cache: Mapping[tuple[int, str], SeriesSurrogate] | None = None,
                     threads: int = 1) -> dict[tuple[int, str], SeriesSurrogate]:
    """Selected surrogate per ``(experiment_id, species)``.

    Series present in ``cache`` are reused: a surrogate depends only on its
    own experiment's data and a seed derived from its identity. Missing
    series run as independent tasks on up to ``threads`` threads.
    """
    cache = dict(cache or {})
    todo = []
    for e in experiments:
        if e.times.size == 0:
            raise PipelineError(f"experiment {e.experiment_id} has no measurements")
        todo.extend((e, s) for s in e.species if (e.experiment_id, s) not in cache)
    if threads > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = list(pool.map(lambda job: fit_series(job[0], job[1], cfg), todo))
    else:
        done = [fit_series(e, s, cfg) for e, s in todo]
    for sur in done:
        log.info("surrogate %s: %s (AIC %.4g)", sur.id, sur.fit.expression, sur.fit.aic)
        cache[(sur.experiment_id, sur.species)] = sur
    return {(e.experiment_id, s): cache[(e.experiment_id, s)] for e in experiments for s in e.species}


# ---------------------------------------------------------------------------
# rate estimates

@dataclass
class RateDataset:
    """Pooled rate estimates, one row per (experiment, sample time, species).

    ``rate`` holds the common reaction rate implied by a species' surrogate
    derivative, ``dC_s/dt / nu_s``; ``states`` holds all species' surrogate
    concentrations at the row's time, the inputs of a rate law.
    """

    species: tuple[str, ...]
    experiment_id: np.ndarray
    time: np.ndarray
    source: list[str]
    surrogate_id: list[str]
    rate: np.ndarray
    states: np.ndarray
    trajectories: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    dropped: int = 0

    def __len__(self) -> int:
        return int(self.rate.size)

    def inputs(self) -> dict[str, np.ndarray]:
        return {s: self.states[:, j] for j, s in enumerate(self.species)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment_id", "time_h", "species", "rate_M_per_h", "surrogate_id",
                    *(f"state_{s}" for s in self.species)])
        for i in range(len(self)):
            w.writerow([int(self.experiment_id[i]), repr(float(self.time[i])), self.source[i],
                        repr(float(self.rate[i])), self.surrogate_id[i],
                        *(repr(float(x)) for x in self.states[i])])
        return buf.getvalue()


def estimate_rates(surrogates: Mapping[tuple[int, str], SeriesSurrogate],
                   experiments: Sequence[ExperimentDataset], stoichiometry: Sequence[float]) -> RateDataset:
    """Evaluate surrogate derivatives at the sample times and rescale them to the common rate.

    Species with a zero coefficient contribute states but no rows. A row
    whose derivative or states are not finite is dropped and counted.

    Raises
    ------
    PipelineError
        If a series has no surrogate.
    """
    nu = np.asarray(stoichiometry, dtype=float)
    if not experiments:
        raise PipelineError("no experiments to estimate rates from")
    species = experiments[0].species
    eids, times, src, sids, rates, states = [], [], [], [], [], []
    traj: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    dropped = 0
    for e in experiments:
        try:
            surs = [surrogates[(e.experiment_id, s)] for s in species]
        except KeyError as exc:
            raise PipelineError(f"no surrogate for series {exc.args[0]}") from None
        t = e.times
        x = np.column_stack([sur.value(t) for sur in surs])
        traj[e.experiment_id] = (t, x)
        good_x = np.all(np.isfinite(x), axis=1)
        derivs = [sur.derivative(t) / nu[j] if nu[j] != 0 else None for j, sur in enumerate(surs)]
        for i in range(t.size):
            for j, sur in enumerate(surs):
                if derivs[j] is None:
                    continue
                r = derivs[j][i]
                if not (np.isfinite(r) and good_x[i]):
                    dropped += 1
                    continue
                eids.append(e.experiment_id)
                times.append(t[i])
                src.append(species[j])
                sids.append(sur.id)
                rates.append(r)
                states.append(x[i])
    if dropped:
        log.warning("dropped %d rate rows with non-finite surrogate values", dropped)
    return RateDataset(tuple(species), np.array(eids, dtype=int), np.array(times, dtype=float), src, sids,
                       np.array(rates, dtype=float),
                       np.array(states, dtype=float).reshape(len(rates), len(species)), traj, dropped)


# ---------------------------------------------------------------------------
# state

@dataclass
class RoundRecord:
    """Outcome of one discovery round."""

    index: int
    experiment_ids: list[int]
    best: FitResult
    runner_up: FitResult | None
    match: bool | None
    surrogate_violations: int
    rate_violation: bool
    dropped_rates: int
    stop_reason: str | None = None
    design: dict | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "experiment_ids": list(self.experiment_ids),
            "best": self.best.to_dict(),
            "best_expression": serialize(bind(self.best.model, self.best.theta)),
            "runner_up": None if self.runner_up is None else self.runner_up.to_dict(),
            "match": self.match,
            "surrogate_violations": self.surrogate_violations,
            "rate_violation": self.rate_violation,
            "dropped_rates": self.dropped_rates,
            "stop_reason": self.stop_reason,
            "design": self.design,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RoundRecord":
        return cls(int(d["index"]), [int(x) for x in d["experiment_ids"]], FitResult.from_dict(d["best"]),
                   None if d["runner_up"] is None else FitResult.from_dict(d["runner_up"]), d["match"],
                   int(d["surrogate_violations"]), bool(d["rate_violation"]), int(d["dropped_rates"]),
                   d.get("stop_reason"), d.get("design"))


@dataclass
class DiscoveryState:
    """Accumulated experiments, cached surrogates and the record of every round."""

    config: RunConfig
    experiments: list[ExperimentDataset]
    rounds: list[RoundRecord] = field(default_factory=list)
    surrogates: dict[tuple[int, str], SeriesSurrogate] = field(default_factory=dict)
    rate_tables: list[ChampionTable] = field(default_factory=list)
    stop_reason: str | None = None

    @property
    def round_index(self) -> int:
        return len(self.rounds)

    @property
    def best(self) -> FitResult | None:
        return self.rounds[-1].best if self.rounds else None

    @property
    def runner_up(self) -> FitResult | None:
        return self.rounds[-1].runner_up if self.rounds else None

    @property
    def aic_trace(self) -> list[float]:
        return [r.best.aic for r in self.rounds]

    @property
    def match(self) -> bool | None:
        return self.rounds[-1].match if self.rounds else None

    @property
    def violating_selections(self) -> int:
        """Selected surrogates (each series once) plus per-round rate selections breaching a constraint."""
        tol = self.config.violation_tol
        n = sum(_violates(s.fit.penalty_report, tol) for s in self.surrogates.values())
        return n + sum(r.rate_violation for r in self.rounds)

    def report(self) -> dict:
        best = self.best
        return _io.jsonable({
            "label": self.config.label,
            "name": self.config.name,
            "case": self.config.case.name,
            "mode": self.config.mode,
            "stop_reason": self.stop_reason,
            "match": self.match,
            "n_experiments": len(self.experiments),
            "n_rounds": self.round_index,
            "selected_model": None if best is None else best.expression,
            "selected_expression": None if best is None else serialize(bind(best.model, best.theta)),
            "theta": None if best is None else [float(x) for x in best.theta],
            "aic": None if best is None else best.aic,
            "runner_up": None if self.runner_up is None else self.runner_up.expression,
            "aic_trace": self.aic_trace,
            "violating_selections": self.violating_selections,
            "dropped_rate_rows": sum(r.dropped_rates for r in self.rounds),
            "seeds": self.config.seeds.to_dict(),
        })


# ---------------------------------------------------------------------------
# one round

def _runner_up(ranked: Sequence[FitResult]) -> FitResult | None:
    if len(ranked) < 2:
        return None
    key = canonical_form(ranked[0].model)
    for f in ranked[1:]:
        if canonical_form(f.model) != key:
            return f
    return ranked[1]


@dataclass
class _RoundArtifacts:
    surrogates: dict[tuple[int, str], SeriesSurrogate]
    rates: RateDataset
    table: ChampionTable
    fits: list[FitResult]
    ranked: list[FitResult]


def run_round(state: DiscoveryState, threads: int = 1) -> tuple[RoundRecord, _RoundArtifacts]:
    """Surrogates, rate estimates, rate-law search, dynamic refinement and ranking on the current data."""
    cfg = state.config
    case = cfg.case
    k = state.round_index + 1
    try:
        surrogates = build_surrogates(state.experiments, cfg, state.surrogates, threads)
    except PipelineError as exc:
        raise PipelineError(f"round {k}: {exc}") from None
    rates = estimate_rates(surrogates, state.experiments, case.stoichiometry)
    if len(rates) == 0:
        raise PipelineError(f"round {k}: every rate estimate was dropped")
    spec = rate_spec(rates, cfg.rate.constraints, cfg.constraints_off)
    gp = cfg.rate_gp().with_(seed=derive_seed(cfg.seeds.gp_seed, _RATE_GP, k))
    table = search(rates.inputs(), rates.rate, spec, gp)
    if not len(table):
        raise PipelineError(f"round {k}: rate-law search failed: {table.diagnostic}")
    fits = []
    for c in _refine_pool(table, cfg.rate.max_refine):
        settings = replace(cfg.rate.optimizer, seed=derive_seed(cfg.seeds.gp_seed, _RATE_FIT, k, c.complexity))
        fits.append(fit_rate_dynamic(c.tree, state.experiments, case.stoichiometry, spec, settings, init=c.theta))
    ranked = rank_by_aic(fits)
    if not ranked:
        raise PipelineError(f"round {k}: rate-law selection failed: no refined champion has a finite AIC")
    best = ranked[0]
    match = structurally_equal(best.model, case.truth_tree) if cfg.mode == "benchmark" else None
    tol = cfg.violation_tol
    record = RoundRecord(
        index=k,
        experiment_ids=[e.experiment_id for e in state.experiments],
        best=best,
        runner_up=_runner_up(ranked),
        match=match,
        surrogate_violations=sum(_violates(s.fit.penalty_report, tol) for s in surrogates.values()),
        rate_violation=_violates(best.penalty_report, tol),
        dropped_rates=rates.dropped,
    )
    log.info("round %d: best %s (AIC %.6g), match=%s", k, best.expression, best.aic, match)
    return record, _RoundArtifacts(surrogates, rates, table, fits, ranked)


def _design_next(state: DiscoveryState, record: RoundRecord):
    cfg = state.config
    case = cfg.case
    k = record.index
    if record.runner_up is None:
        raise PipelineError(f"round {k}: design needs two distinct rate models but only one was fitted")
    lo, hi = case.bounds
    if cfg.mbdoe.lower is not None:
        lo = np.asarray(cfg.mbdoe.lower, dtype=float)
    if cfg.mbdoe.upper is not None:
        hi = np.asarray(cfg.mbdoe.upper, dtype=float)
    problem = DesignProblem(
        (record.best.model, record.best.theta), (record.runner_up.model, record.runner_up.theta),
        case.species, case.stoichiometry, lo, hi, horizon=case.horizon, n_grid=cfg.mbdoe.n_grid,
        include_x0_term=cfg.mbdoe.include_x0_term, lattice_points=cfg.mbdoe.lattice_points,
        n_starts=cfg.mbdoe.n_starts, seed=derive_seed(cfg.seeds.mbdoe_seed, _DESIGN, k))
    try:
        result = design(problem)
    except DesignError as exc:
        raise PipelineError(f"round {k}: experimental design failed: {exc}") from None
    new_id = max(e.experiment_id for e in state.experiments) + 1
    exp = run_experiment(case, result.x0, rng=experiment_seed(cfg.seeds.noise_seed, new_id),
                         experiment_id=new_id, provenance=f"mbdoe_round_{k}")
    return result, exp


# ---------------------------------------------------------------------------
# persistence

def _round_dir(run_dir: Path, k: int) -> Path:
    return run_dir / f"round_{k}"


def _experiments_meta(experiments: Sequence[ExperimentDataset]) -> list[dict]:
    return [{"experiment_id": e.experiment_id, "x0": [float(v) for v in e.x0], "provenance": e.provenance}
            for e in experiments]


def _persist_round(run_dir: Path, state: DiscoveryState, record: RoundRecord, art: _RoundArtifacts,
                   design_result=None, new_exp: ExperimentDataset | None = None) -> None:
    d = _round_dir(run_dir, record.index)
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    _io.write_text(d / "datasets.csv", datasets_to_csv(state.experiments))
    _io.write_json(d / "experiments.json", _experiments_meta(state.experiments))
    _io.write_json(d / "surrogates.json", [art.surrogates[key].to_dict() for key in sorted(art.surrogates)])
    _io.write_text(d / "rates.csv", art.rates.to_csv())
    _io.write_json(d / "rate_champions.json", art.table.to_dict())
    _io.write_text(d / "gp_trace.csv", art.table.trace_csv())
    _io.write_json(d / "rate_fits.json", [f.to_dict() for f in art.ranked])
    _io.write_json(d / "selection.json", record.to_dict())
    if design_result is not None:
        _io.write_json(d / "mbdoe.json", design_result.to_dict())
        _io.write_text(d / "mbdoe_landscape.csv", design_result.landscape_csv(state.config.case.species))
        _io.write_text(d / "new_experiment.csv", datasets_to_csv([new_exp]))
        _io.write_json(d / "new_experiment.json", _experiments_meta([new_exp]))
    _io.write_text(d / "complete", "")


def _complete_rounds(run_dir: Path) -> int:
    k = 0
    while (_round_dir(run_dir, k + 1) / "complete").exists():
        k += 1
    return k


def _read_experiments(csv_path: Path, meta_path: Path, species) -> list[ExperimentDataset]:
    meta = {m["experiment_id"]: m for m in _io.read_json(meta_path)}
    exps = read_datasets_csv(csv_path, species, {k: m["x0"] for k, m in meta.items()})
    return exps


def load_state(run_dir: str | Path, cfg: RunConfig) -> DiscoveryState | None:
    """Rebuild the state after the last complete round, or ``None`` if there is none."""
    run_dir = Path(run_dir)
    k = _complete_rounds(run_dir)
    if k == 0:
        return None
    d = _round_dir(run_dir, k)
    species = cfg.case.species
    experiments = _read_experiments(d / "datasets.csv", d / "experiments.json", species)
    if (d / "new_experiment.csv").exists():
        experiments += _read_experiments(d / "new_experiment.csv", d / "new_experiment.json", species)
    surrogates = {}
    for s in _io.read_json(d / "surrogates.json"):
        sur = SeriesSurrogate.from_dict(s)
        surrogates[(sur.experiment_id, sur.species)] = sur
    rounds = [RoundRecord.from_dict(_io.read_json(_round_dir(run_dir, i) / "selection.json"))
              for i in range(1, k + 1)]
    tables = [ChampionTable.from_dict(_io.read_json(_round_dir(run_dir, i) / "rate_champions.json"))
              for i in range(1, k + 1)]
    return DiscoveryState(cfg, experiments, rounds, surrogates, tables, rounds[-1].stop_reason)


def initial_experiments(cfg: RunConfig) -> list[ExperimentDataset]:
    """Measured data from ``cfg.data`` or, without it, the case's designed experiments."""
    if cfg.data is not None:
        return read_datasets_csv(cfg.data, cfg.case.species)
    return run_designed(cfg.case, cfg.seeds.noise_seed)


# ---------------------------------------------------------------------------
# loop

def discover(cfg: RunConfig, experiments: Sequence[ExperimentDataset] | None = None, *,
             run_dir: str | Path | None = None, resume: bool = False, threads: int = 1,
             confirm: Callable[[DiscoveryState], bool] | None = None) -> DiscoveryState:
    """Run rounds until the stop predicate holds or the experiment budget is spent.

    Parameters
    ----------
    cfg : RunConfig
    experiments : sequence of ExperimentDataset, optional
        Initial data; defaults to :func:`initial_experiments`.
    run_dir : path, optional
        Where rounds and the final ``report.json`` are written.
    resume : bool
        Continue after the last complete round found in ``run_dir``.
    threads : int
        Worker threads for the per-series surrogate searches.
    confirm : callable, optional
        Blind-mode stop predicate, called with the state after each round.

    Returns
    -------
    DiscoveryState
        ``stop_reason`` is ``"satisfied"`` or ``"budget_exhausted"``.

    Raises
    ------
    PipelineError
        If a round cannot complete; the message carries the round index.
    """
    run_dir = None if run_dir is None else Path(run_dir)
    state = None
    if resume:
        if run_dir is None:
            raise ValueError("resume needs a run directory")
        state = load_state(run_dir, cfg)
    if state is None:
        exps = list(experiments) if experiments is not None else initial_experiments(cfg)
        if not exps:
            raise PipelineError("no initial experiments")
        if cfg.budget < len(exps):
            raise PipelineError(f"budget {cfg.budget} is below the {len(exps)} initial experiments")
        state = DiscoveryState(cfg, exps)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        if not state.rounds:
            for stale in run_dir.glob("round_*"):
                shutil.rmtree(stale)
            (run_dir / "report.json").unlink(missing_ok=True)
        _io.write_json(run_dir / "config.json", cfg.to_dict())

    while state.stop_reason is None:
        record, art = run_round(state, threads)
        state.surrogates = dict(art.surrogates)
        state.rate_tables.append(art.table)
        if cfg.mode == "benchmark":
            satisfied = bool(record.match)
        else:
            state.rounds.append(record)
            satisfied = bool(confirm(state)) if confirm is not None else False
            state.rounds.pop()
        result = new_exp = None
        if satisfied:
            record.stop_reason = SATISFIED
        elif len(state.experiments) >= cfg.budget:
            record.stop_reason = BUDGET_EXHAUSTED
        else:
            result, new_exp = _design_next(state, record)
            record.design = {**result.to_dict(), "experiment_id": new_exp.experiment_id}
        state.rounds.append(record)
        if run_dir is not None:
            _persist_round(run_dir, state, record, art, result, new_exp)
        if new_exp is not None:
            state.experiments.append(new_exp)
        state.stop_reason = record.stop_reason

    if run_dir is not None:
        _io.write_json(run_dir / "report.json", state.report())
    return state
