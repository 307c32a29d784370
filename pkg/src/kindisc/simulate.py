"""In-silico batch reactor: ground-truth case studies and noisy experiments."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import null_space

from .expr import Node, call, compile_tree, parse

__all__ = [
    "CaseStudy",
    "ExperimentDataset",
    "SimulationError",
    "CASES",
    "get_case",
    "integrate_truth",
    "run_experiment",
    "run_designed",
    "conservation_basis",
    "write_datasets_csv",
    "read_datasets_csv",
    "datasets_to_csv",
]

CSV_COLUMNS = ("experiment_id", "time_h", "species", "value_M", "provenance")


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CaseStudy:
    """A single-reaction system with a known rate law.

    ``truth`` is the rate expression with parameter slots and ``truth_params``
    their values; ``stoichiometry[s]`` multiplies the rate in ``dC_s/dt``.
    """

    name: str
    species: tuple[str, ...]
    truth: str
    truth_params: tuple[float, ...]
    stoichiometry: tuple[float, ...]
    designs: tuple[tuple[float, ...], ...]
    horizon: tuple[float, float] = (0.0, 10.0)
    n_samples: int = 15
    noise_sigma: float = 0.2
    x0_lower: tuple[float, ...] | None = None
    x0_upper: tuple[float, ...] | None = None

    def __post_init__(self):
        n = len(self.species)
        if len(self.stoichiometry) != n:
            raise ValueError(f"case {self.name!r}: one stoichiometric coefficient per species")
        if any(len(d) != n for d in self.designs):
            raise ValueError(f"case {self.name!r}: designed initial conditions need {n} entries")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if not self.horizon[1] > self.horizon[0]:
            raise ValueError("horizon must be increasing")
        tree = parse(self.truth, self.species)
        from .expr import n_params

        if n_params(tree) != len(self.truth_params):
            raise ValueError(f"case {self.name!r}: truth has {n_params(tree)} parameters")

    @property
    def truth_tree(self) -> Node:
        return parse(self.truth, self.species)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Initial-condition box; defaults to the envelope of the designed experiments."""
        d = np.asarray(self.designs, dtype=float)
        lo = d.min(axis=0) if self.x0_lower is None else np.asarray(self.x0_lower, dtype=float)
        hi = d.max(axis=0) if self.x0_upper is None else np.asarray(self.x0_upper, dtype=float)
        return lo, hi

    def sample_times(self, n_t: int | None = None) -> np.ndarray:
        return np.linspace(self.horizon[0], self.horizon[1], n_t or self.n_samples)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "species": list(self.species),
            "truth": self.truth,
            "truth_params": list(self.truth_params),
            "stoichiometry": list(self.stoichiometry),
            "designs": [list(d) for d in self.designs],
            "horizon": list(self.horizon),
            "n_samples": self.n_samples,
            "noise_sigma": self.noise_sigma,
            "x0_lower": None if self.x0_lower is None else list(self.x0_lower),
            "x0_upper": None if self.x0_upper is None else list(self.x0_upper),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaseStudy":
        return cls(
            name=d["name"],
            species=tuple(d["species"]),
            truth=d["truth"],
            truth_params=tuple(float(x) for x in d["truth_params"]),
            stoichiometry=tuple(float(x) for x in d["stoichiometry"]),
            designs=tuple(tuple(float(x) for x in row) for row in d["designs"]),
            horizon=tuple(float(x) for x in d.get("horizon", (0.0, 10.0))),
            n_samples=int(d.get("n_samples", 15)),
            noise_sigma=float(d.get("noise_sigma", 0.2)),
            x0_lower=None if d.get("x0_lower") is None else tuple(float(x) for x in d["x0_lower"]),
            x0_upper=None if d.get("x0_upper") is None else tuple(float(x) for x in d["x0_upper"]),
        )


# r = -2 dC_NO/dt = 2 dC_N/dt = dC_O/dt, hence nu = (-1/2, +1/2, +1)
N2O = CaseStudy(
    name="n2o",
    species=("CNO", "CN", "CO"),
    truth="p1*CNO*CNO/(1 + p2*CNO)",
    truth_params=(2.0, 5.0),
    stoichiometry=(-0.5, 0.5, 1.0),
    designs=((5, 0, 0), (10, 0, 0), (5, 2, 0), (5, 0, 3), (0, 2, 3)),
)

TOLUENE = CaseStudy(
    name="toluene",
    species=("CT", "CH", "CB", "CM"),
    truth="p1*CT*CH/(1 + p2*CB + p3*CT)",
    truth_params=(2.0, 9.0, 5.0),
    stoichiometry=(-1.0, -1.0, 1.0, 1.0),
    designs=((1, 8, 2, 3), (5, 8, 0, 0.5), (5, 3, 0, 0.5), (1, 3, 0, 3), (1, 8, 2, 0.5)),
)

ISOMERIZATION = CaseStudy(
    name="isomerization",
    species=("CA", "CB"),
    truth="(p1*CA - p2*CB)/(p3*CA + p4*CB + p5)",
    truth_params=(7.0, 3.0, 4.0, 2.0, 6.0),
    stoichiometry=(-1.0, 1.0),
    designs=((2, 0), (10, 0), (2, 2), (10, 2), (10, 1)),
)

CASES = {c.name: c for c in (N2O, TOLUENE, ISOMERIZATION)}


def get_case(name: str) -> CaseStudy:
    try:
        return CASES[name]
    except KeyError:
        raise KeyError(f"unknown case study {name!r}; built-ins are {sorted(CASES)}") from None


@dataclass
class ExperimentDataset:
    """Sampled concentrations of one batch experiment.

    ``values[i, j]`` is the measured concentration of ``species[j]`` at
    ``times[i]``.
    """

    experiment_id: int
    species: tuple[str, ...]
    x0: np.ndarray
    times: np.ndarray
    values: np.ndarray
    provenance: str = "designed"

    def __post_init__(self):
        self.species = tuple(self.species)
        self.x0 = np.asarray(self.x0, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.times.size, len(self.species)):
            raise ValueError(
                f"experiment {self.experiment_id}: values shape {self.values.shape} does not match "
                f"{self.times.size} times x {len(self.species)} species"
            )
        if self.x0.shape != (len(self.species),):
            raise ValueError(f"experiment {self.experiment_id}: x0 needs one entry per species")
        if self.times.size and np.any(np.diff(self.times) <= 0):
            raise ValueError(f"experiment {self.experiment_id}: times must be strictly increasing")

    @property
    def n_measurements(self) -> int:
        return self.values.size

    def series(self, species: str) -> np.ndarray:
        return self.values[:, self.species.index(species)]

    def rows(self) -> Iterable[tuple]:
        for i, t in enumerate(self.times):
            for j, s in enumerate(self.species):
                yield (self.experiment_id, float(t), s, float(self.values[i, j]), self.provenance)


def conservation_basis(stoichiometry: Sequence[float]) -> np.ndarray:
    """Rows span the linear combinations of species left invariant by the reaction."""
    nu = np.asarray(stoichiometry, dtype=float).reshape(1, -1)
    return null_space(nu).T


def _rhs_factory(case: CaseStudy, params):
    fn = compile_tree(case.truth_tree)
    theta = np.asarray(case.truth_params if params is None else params, dtype=float)
    nu = np.asarray(case.stoichiometry, dtype=float)
    species = case.species

    def rhs(t, y):
        # rate sees the state projected onto the non-negative orthant
        c = np.maximum(y, 0.0)
        r = float(call(fn, theta, {s: c[j] for j, s in enumerate(species)}))
        return nu * r

    return rhs


def integrate_truth(case: CaseStudy, x0, grid, *, params=None, rtol: float = 1e-10,
                    atol: float = 1e-10) -> np.ndarray:
    """Noiseless trajectory of the true system on ``grid``.

    Returns an array of shape ``(len(grid), n_species)``.

    Raises
    ------
    SimulationError
        If the adaptive Runge-Kutta solver fails; the message names the time.
    """
    x0 = np.asarray(x0, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if x0.shape != (len(case.species),):
        raise ValueError(f"x0 needs {len(case.species)} entries")
    if np.any(x0 < 0) or not np.all(np.isfinite(x0)):
        raise ValueError("initial concentrations must be finite and non-negative")
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be non-empty and strictly increasing")
    t0 = min(case.horizon[0], grid[0])
    if grid[0] < case.horizon[0] or grid[-1] > case.horizon[1] + 1e-12:
        raise ValueError(f"grid must lie inside the horizon {case.horizon}")
    if grid[-1] == t0:
        return np.tile(x0, (grid.size, 1))
    sol = solve_ivp(_rhs_factory(case, params), (t0, grid[-1]), x0, method="DOP853",
                    t_eval=grid, rtol=rtol, atol=atol)
    if sol.status != 0:
        t_fail = sol.t[-1] if sol.t.size else t0
        raise SimulationError(f"{case.name}: integration failed at t={t_fail:g} h: {sol.message}")
    return sol.y.T


def run_experiment(case: CaseStudy, x0, n_t: int | None = None, sigma: float | None = None,
                   rng: np.random.Generator | int | None = None, *, experiment_id: int = 1,
                   provenance: str = "designed") -> ExperimentDataset:
    """Simulate one experiment sampled at ``n_t`` uniform times including both ends.

    Noise is i.i.d. Gaussian per measurement and is not clipped.
    """
    sigma = case.noise_sigma if sigma is None else float(sigma)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(rng)
    times = case.sample_times(n_t)
    clean = integrate_truth(case, x0, times)
    noise = rng.normal(0.0, sigma, size=clean.shape) if sigma > 0 else np.zeros_like(clean)
    return ExperimentDataset(experiment_id, case.species, np.asarray(x0, dtype=float), times,
                             clean + noise, provenance)


def experiment_seed(noise_seed: int, experiment_id: int) -> np.random.Generator:
    """Independent noise stream per experiment, stable under resume."""
    return np.random.default_rng(np.random.SeedSequence([int(noise_seed), int(experiment_id)]))


def run_designed(case: CaseStudy, noise_seed: int = 0, sigma: float | None = None,
                 n_t: int | None = None) -> list[ExperimentDataset]:
    """Run every designed initial condition of ``case``; ids start at 1."""
    return [
        run_experiment(case, x0, n_t, sigma, experiment_seed(noise_seed, k), experiment_id=k)
        for k, x0 in enumerate(case.designs, start=1)
    ]


# ---------------------------------------------------------------------------
# CSV

def datasets_to_csv(datasets: Sequence[ExperimentDataset]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for d in datasets:
        for eid, t, s, v, prov in d.rows():
            w.writerow([eid, repr(t), s, repr(v), prov])
    return buf.getvalue()


def write_datasets_csv(path, datasets: Sequence[ExperimentDataset]) -> Path:
    path = Path(path)
    path.write_text(datasets_to_csv(datasets))
    return path


def read_datasets_csv(path, species: Sequence[str] | None = None,
                      x0: dict[int, Sequence[float]] | None = None) -> list[ExperimentDataset]:
    """Read experiments back from the long CSV format.

    Initial conditions come from ``x0`` when given, otherwise from the
    measurement at the first sample time.
    """
    text = Path(path).read_text()
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
    table: dict[int, dict] = {}
    seen_species: list[str] = []
    for row in reader:
        eid = int(row["experiment_id"])
        s = row["species"]
        if s not in seen_species:
            seen_species.append(s)
        rec = table.setdefault(eid, {"prov": row["provenance"], "data": {}})
        rec["data"][(float(row["time_h"]), s)] = float(row["value_M"])
    species = tuple(species) if species is not None else tuple(seen_species)
    out = []
    for eid in sorted(table):
        rec = table[eid]
        times = sorted({t for t, _ in rec["data"]})
        try:
            values = np.array([[rec["data"][(t, s)] for s in species] for t in times])
        except KeyError as exc:
            raise ValueError(f"{path}: experiment {eid} is missing measurement {exc.args[0]}") from None
        init = values[0] if x0 is None or eid not in x0 else np.asarray(x0[eid], dtype=float)
        out.append(ExperimentDataset(eid, species, init, np.array(times), values, rec["prov"]))
    return out
