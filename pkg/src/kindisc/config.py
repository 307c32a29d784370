"""Run configuration: one JSON file drives simulate, discover, uq and report."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

from .constraints import KINDS
from .estimate import OptimizerSettings
from .gpsearch import GPConfig
from .simulate import CASES, CaseStudy
from .uq import MHConfig

__all__ = [
    "SCHEMA_VERSION",
    "ConfigError",
    "ConstraintTemplate",
    "PhaseConfig",
    "MBDoESettings",
    "UQSettings",
    "Seeds",
    "RunConfig",
    "load_config",
    "default_config",
]

SCHEMA_VERSION = 1
MODES = ("benchmark", "blind")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class ConstraintTemplate:
    """A constraint kind to instantiate for every series (or every experiment, for rates).

    ``sign`` and ``direction`` left as ``None`` are inferred from the data:
    concentrations are non-negative, a concentration's direction follows its
    measured trend, and a rate's sign follows its estimated values in each
    experiment with its magnitude decaying in time. ``species`` restricts
    a concentration-phase template to the listed species.
    """

    kind: str
    weight: float = 1.0
    enabled: bool = True
    sign: int | None = None
    direction: int | None = None
    t_a: float = 50.0
    t_b: float = 60.0
    species: tuple[str, ...] | None = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "weight": self.weight, "enabled": self.enabled}
        for name in ("sign", "direction", "species"):
            v = getattr(self, name)
            if v is not None:
                d[name] = list(v) if isinstance(v, tuple) else v
        if self.kind == "equilibrium":
            d["t_a"], d["t_b"] = self.t_a, self.t_b
        return d


@dataclass(frozen=True)
class PhaseConfig:
    gp: GPConfig
    constraints: tuple[ConstraintTemplate, ...]
    optimizer: OptimizerSettings
    max_refine: int | None = None

    def to_dict(self) -> dict:
        gp = self.gp.to_dict()
        gp.pop("seed", None)
        opt = self.optimizer.to_dict()
        opt.pop("seed", None)
        return {
            "gp": gp,
            "constraints": [c.to_dict() for c in self.constraints],
            "optimizer": {k: (list(v) if isinstance(v, tuple) else v) for k, v in opt.items()},
            "max_refine": self.max_refine,
        }


@dataclass(frozen=True)
class MBDoESettings:
    n_grid: int = 201
    lattice_points: int = 5
    n_starts: int = 4
    include_x0_term: bool = False
    lower: tuple[float, ...] | None = None
    upper: tuple[float, ...] | None = None

    def to_dict(self) -> dict:
        return {
            "n_grid": self.n_grid,
            "lattice_points": self.lattice_points,
            "n_starts": self.n_starts,
            "include_x0_term": self.include_x0_term,
            "lower": None if self.lower is None else list(self.lower),
            "upper": None if self.upper is None else list(self.upper),
        }


@dataclass(frozen=True)
class UQSettings:
    mh: MHConfig = field(default_factory=MHConfig)
    band_k: int = 3
    n_draws: int = 200

    def to_dict(self) -> dict:
        mh = self.mh.to_dict()
        mh.pop("seed", None)
        return {"mh": mh, "band_k": self.band_k, "n_draws": self.n_draws}


@dataclass(frozen=True)
class Seeds:
    gp_seed: int = 0
    noise_seed: int = 0
    mh_seed: int = 0
    mbdoe_seed: int = 0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


DEFAULT_CONCENTRATION_CONSTRAINTS = (
    ConstraintTemplate("initial_condition", weight=1.0),
    ConstraintTemplate("equilibrium", weight=1.0),
    ConstraintTemplate("sign", weight=1.0),
    ConstraintTemplate("monotonicity", weight=1.0),
)
DEFAULT_RATE_CONSTRAINTS = (
    ConstraintTemplate("sign", weight=1.0),
    ConstraintTemplate("monotonicity", weight=1.0),
)

DEFAULT_CONCENTRATION_GP = GPConfig(population_size=200, generations=20, max_complexity=12,
                                    operators=("+", "-", "*", "/", "exp"), variables=("t",))
DEFAULT_RATE_GP = GPConfig(population_size=500, generations=40, max_complexity=15,
                           operators=("+", "-", "*", "/"))
DEFAULT_CONCENTRATION_OPTIMIZER = OptimizerSettings(n_restarts=10)
DEFAULT_RATE_OPTIMIZER = OptimizerSettings(n_restarts=4, presearch_population=8, presearch_generations=20)


@dataclass(frozen=True)
class RunConfig:
    """Everything needed to reproduce a run.

    ``case_ref`` keeps a built-in case by name; any other case is re-emitted
    inline, so a persisted configuration never depends on a side file.
    """

    name: str
    case: CaseStudy
    case_ref: Any
    mode: str = "benchmark"
    constraints_off: bool = False
    budget: int = 5
    seeds: Seeds = field(default_factory=Seeds)
    data: str | None = None
    concentration: PhaseConfig = field(default_factory=lambda: PhaseConfig(
        DEFAULT_CONCENTRATION_GP, DEFAULT_CONCENTRATION_CONSTRAINTS, DEFAULT_CONCENTRATION_OPTIMIZER))
    rate: PhaseConfig = field(default_factory=lambda: PhaseConfig(
        DEFAULT_RATE_GP, DEFAULT_RATE_CONSTRAINTS, DEFAULT_RATE_OPTIMIZER))
    mbdoe: MBDoESettings = field(default_factory=MBDoESettings)
    uq: UQSettings = field(default_factory=UQSettings)
    violation_tol: float = 1e-3

    @property
    def label(self) -> str:
        return "ADoK-S-mode" if self.constraints_off else "PI-ADoK"

    def __post_init__(self):
        # the rate search defaults to every species of the case
        if "t" in self.rate.gp.variables:
            object.__setattr__(self, "rate", replace(self.rate, gp=self.rate.gp.with_(variables=self.case.species)))

    def rate_gp(self) -> GPConfig:
        return self.rate.gp

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "case": self.case_ref if isinstance(self.case_ref, str) and self.case_ref in CASES else self.case.to_dict(),
            "mode": self.mode,
            "constraints_off": self.constraints_off,
            "budget": self.budget,
            "seeds": self.seeds.to_dict(),
            "data": self.data,
            "concentration": self.concentration.to_dict(),
            "rate": self.rate.to_dict(),
            "mbdoe": self.mbdoe.to_dict(),
            "uq": self.uq.to_dict(),
            "violation_tol": self.violation_tol,
        }

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | os.PathLike | None = None) -> "RunConfig":
        return _parse(d, Path(base_dir) if base_dir is not None else None)

    def with_seeds(self, **overrides: int) -> "RunConfig":
        known = {f.name for f in fields(Seeds)}
        for k in overrides:
            if k not in known:
                raise ConfigError(f"seeds.{k}", f"unknown seed; expected one of {sorted(known)}")
        return replace(self, seeds=replace(self.seeds, **{k: int(v) for k, v in overrides.items()}))


def default_config(case: str = "n2o", **changes) -> RunConfig:
    if case not in CASES:
        raise ConfigError("case", f"unknown built-in case {case!r}; expected one of {sorted(CASES)}")
    cfg = RunConfig(name=case, case=CASES[case], case_ref=case, budget=len(CASES[case].designs))
    return replace(cfg, **changes) if changes else cfg


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise ConfigError("<file>", f"config file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return RunConfig.from_dict(d, path.parent)


# ---------------------------------------------------------------------------
# parsing with field paths

def _expect(d, path: str, kind, what: str):
    if not isinstance(d, kind):
        raise ConfigError(path, f"expected {what}")
    return d


def _only(d: Mapping, allowed: Sequence[str], path: str) -> None:
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}" if path else unknown[0], "unknown field")


def _int(v, path: str, minimum: int | None = None) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(path, "expected an integer")
    if minimum is not None and v < minimum:
        raise ConfigError(path, f"must be >= {minimum}")
    return v


def _float(v, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, "expected a number")
    return float(v)


def _case(ref, base: Path | None) -> CaseStudy:
    if isinstance(ref, str):
        if ref in CASES:
            return CASES[ref]
        p = Path(ref)
        if base is not None and not p.is_absolute():
            p = base / p
        if p.suffix == ".json" and p.exists():
            with open(p) as fh:
                ref = json.load(fh)
        else:
            raise ConfigError("case", f"unknown case {ref!r}; expected one of {sorted(CASES)} or a JSON file")
    _expect(ref, "case", Mapping, "a case name or a case definition object")
    try:
        return CaseStudy.from_dict(ref)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("case", f"invalid case definition: {exc}") from None


def _template(d, path: str, species: Sequence[str]) -> ConstraintTemplate:
    _expect(d, path, Mapping, "a constraint object")
    _only(d, ["kind", "weight", "enabled", "sign", "direction", "t_a", "t_b", "species"], path)
    kind = d.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"{path}.kind", f"expected one of {list(KINDS)}")
    weight = _float(d.get("weight", 1.0), f"{path}.weight")
    if weight < 0:
        raise ConfigError(f"{path}.weight", "must be >= 0")
    sign = d.get("sign")
    if sign is not None and sign not in (1, -1):
        raise ConfigError(f"{path}.sign", "must be +1 or -1")
    direction = d.get("direction")
    if isinstance(direction, str):
        direction = {"increasing": 1, "decreasing": -1}.get(direction, direction)
    if direction is not None and direction not in (1, -1):
        raise ConfigError(f"{path}.direction", "must be +1/'increasing' or -1/'decreasing'")
    t_a = _float(d.get("t_a", 50.0), f"{path}.t_a")
    t_b = _float(d.get("t_b", 60.0), f"{path}.t_b")
    if kind == "equilibrium" and not t_b > t_a:
        raise ConfigError(f"{path}.t_b", "must exceed t_a")
    sp = d.get("species")
    if sp is not None:
        _expect(sp, f"{path}.species", list, "a list of species names")
        for i, s in enumerate(sp):
            if s not in species:
                raise ConfigError(f"{path}.species[{i}]", f"unknown species {s!r}; case has {list(species)}")
        sp = tuple(sp)
    enabled = d.get("enabled", True)
    if not isinstance(enabled, bool):
        raise ConfigError(f"{path}.enabled", "expected true or false")
    return ConstraintTemplate(kind, weight, enabled, sign, direction, t_a, t_b, sp)


def _phase(d, path: str, default: PhaseConfig, species: Sequence[str], is_rate: bool) -> PhaseConfig:
    if d is None:
        return default
    _expect(d, path, Mapping, "an object")
    _only(d, ["gp", "constraints", "optimizer", "max_refine"], path)
    gp = default.gp
    if "gp" in d:
        g = _expect(d["gp"], f"{path}.gp", Mapping, "an object")
        base = {k: v for k, v in default.gp.to_dict().items() if k != "seed"}
        allowed = set(base)
        for k in g:
            if k not in allowed:
                raise ConfigError(f"{path}.gp.{k}", "unknown field")
        merged = {**base, **g}
        if is_rate and "variables" in g:
            for i, v in enumerate(g["variables"]):
                if v not in species:
                    raise ConfigError(f"{path}.gp.variables[{i}]", f"unknown species {v!r}")
        if not is_rate and tuple(merged["variables"]) != ("t",):
            raise ConfigError(f"{path}.gp.variables", "concentration surrogates depend on time only: ['t']")
        try:
            gp = GPConfig.from_dict(merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}.gp", str(exc)) from None
    constraints = default.constraints
    if "constraints" in d:
        lst = _expect(d["constraints"], f"{path}.constraints", list, "a list")
        constraints = tuple(_template(c, f"{path}.constraints[{i}]", species) for i, c in enumerate(lst))
    optimizer = default.optimizer
    if "optimizer" in d:
        o = _expect(d["optimizer"], f"{path}.optimizer", Mapping, "an object")
        base = {k: v for k, v in default.optimizer.to_dict().items() if k != "seed"}
        for k in o:
            if k not in base:
                raise ConfigError(f"{path}.optimizer.{k}", "unknown field")
        merged = {**base, **o}
        for k in ("positive_range", "signed_range"):
            merged[k] = tuple(merged[k])
        try:
            optimizer = OptimizerSettings(**merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}.optimizer", str(exc)) from None
    max_refine = d.get("max_refine", default.max_refine)
    if max_refine is not None:
        max_refine = _int(max_refine, f"{path}.max_refine", 1)
    return PhaseConfig(gp, constraints, optimizer, max_refine)


def _parse(d: Mapping, base: Path | None) -> RunConfig:
    _expect(d, "<root>", Mapping, "a JSON object")
    _only(d, ["schema_version", "name", "case", "mode", "constraints_off", "budget", "seeds", "data",
              "concentration", "rate", "mbdoe", "uq", "violation_tol"], "")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"expected {SCHEMA_VERSION}, got {version!r}")
    if "case" not in d:
        raise ConfigError("case", "required")
    case = _case(d["case"], base)
    species = case.species
    name = d.get("name", case.name)
    if not isinstance(name, str) or not name or "/" in name or name in (".", ".."):
        raise ConfigError("name", "expected a plain, non-empty run name")
    mode = d.get("mode", "benchmark")
    if mode not in MODES:
        raise ConfigError("mode", f"expected one of {list(MODES)}")
    off = d.get("constraints_off", False)
    if not isinstance(off, bool):
        raise ConfigError("constraints_off", "expected true or false")
    budget = _int(d.get("budget", len(case.designs)), "budget", 1)

    seeds = Seeds()
    if "seeds" in d:
        s = _expect(d["seeds"], "seeds", Mapping, "an object")
        _only(s, [f.name for f in fields(Seeds)], "seeds")
        seeds = Seeds(**{k: _int(v, f"seeds.{k}", 0) for k, v in s.items()})

    data = d.get("data")
    if data is not None and not isinstance(data, str):
        raise ConfigError("data", "expected a path to a dataset CSV")
    if data is not None and base is not None and not Path(data).is_absolute():
        data_path = str(base / data)
    else:
        data_path = data
    n_initial = len(case.designs)
    if data_path is not None:
        if not Path(data_path).exists():
            raise ConfigError("data", f"dataset {data!r} not found")
        from .simulate import read_datasets_csv

        try:
            n_initial = len(read_datasets_csv(data_path, species))
        except (KeyError, ValueError) as exc:
            raise ConfigError("data", f"unreadable dataset: {exc}") from None
    if budget < n_initial:
        raise ConfigError("budget", f"must be >= the {n_initial} initial experiments")

    default = RunConfig(name=name, case=case, case_ref=d["case"])
    conc = _phase(d.get("concentration"), "concentration", default.concentration, species, False)
    rate = _phase(d.get("rate"), "rate", default.rate, species, True)

    mb = MBDoESettings()
    if d.get("mbdoe") is not None:
        m = _expect(d["mbdoe"], "mbdoe", Mapping, "an object")
        _only(m, [f.name for f in fields(MBDoESettings)], "mbdoe")
        kw = {}
        for k in ("n_grid", "lattice_points", "n_starts"):
            if k in m:
                kw[k] = _int(m[k], f"mbdoe.{k}", 16 if k == "n_grid" else (1 if k == "lattice_points" else 0))
        if "include_x0_term" in m:
            if not isinstance(m["include_x0_term"], bool):
                raise ConfigError("mbdoe.include_x0_term", "expected true or false")
            kw["include_x0_term"] = m["include_x0_term"]
        for k in ("lower", "upper"):
            if m.get(k) is not None:
                v = _expect(m[k], f"mbdoe.{k}", list, "a list of numbers")
                if len(v) != len(species):
                    raise ConfigError(f"mbdoe.{k}", f"expected {len(species)} entries (one per species)")
                kw[k] = tuple(_float(x, f"mbdoe.{k}[{i}]") for i, x in enumerate(v))
        mb = MBDoESettings(**kw)
        lo = mb.lower if mb.lower is not None else case.bounds[0]
        hi = mb.upper if mb.upper is not None else case.bounds[1]
        for i, (a, b) in enumerate(zip(lo, hi)):
            if a > b:
                raise ConfigError(f"mbdoe.lower[{i}]", "exceeds the upper bound")
            if a < 0:
                raise ConfigError(f"mbdoe.lower[{i}]", "initial concentrations must be >= 0")

    uq = UQSettings()
    if d.get("uq") is not None:
        u = _expect(d["uq"], "uq", Mapping, "an object")
        _only(u, ["mh", "band_k", "n_draws"], "uq")
        mh = uq.mh
        if "mh" in u:
            m = _expect(u["mh"], "uq.mh", Mapping, "an object")
            if "seed" in m:
                raise ConfigError("uq.mh.seed", "set the sampler seed through seeds.mh_seed")
            try:
                mh = MHConfig.from_dict({**{k: v for k, v in uq.mh.to_dict().items() if k != "seed"}, **m})
            except (TypeError, ValueError) as exc:
                raise ConfigError("uq.mh", str(exc)) from None
        band_k = _int(u.get("band_k", 3), "uq.band_k")
        if band_k not in (1, 2, 3):
            raise ConfigError("uq.band_k", "must be 1, 2 or 3")
        uq = UQSettings(mh, band_k, _int(u.get("n_draws", 200), "uq.n_draws", 1))

    tol = _float(d.get("violation_tol", 1e-3), "violation_tol")
    if tol < 0:
        raise ConfigError("violation_tol", "must be >= 0")
    return RunConfig(name=name, case=case, case_ref=d["case"], mode=mode, constraints_off=off, budget=budget,
                     seeds=seeds, data=data_path, concentration=conc, rate=rate, mbdoe=mb, uq=uq,
                     violation_tol=tol)
