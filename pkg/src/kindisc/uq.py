"""Random-walk Metropolis-Hastings over rate-law parameters and credible bands."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Mapping, Sequence

import numpy as np

from .estimate import DynamicObjective
from .expr import Node
from .simulate import ExperimentDataset

__all__ = [
    "MHConfig",
    "PosteriorSampleSet",
    "Bands",
    "PropagationError",
    "GaussianPrior",
    "log_target",
    "metropolis_hastings",
    "sample",
    "propagate",
    "autocorrelation",
    "batch_means_se",
]


class PropagationError(RuntimeError):
    """No posterior draw could be integrated for some experiment."""


@dataclass(frozen=True)
class MHConfig:
    """Sampler settings.

    ``proposal_scale`` sets the initial proposal standard deviation of each
    parameter as a fraction of ``|theta0|`` (floored at ``proposal_floor``);
    ``proposal_std`` overrides it explicitly. The tuning phase adapts the
    proposal in blocks of ``tuning_block`` proposals, multiplying by
    ``tuning_factor`` when acceptance is above the target window and dividing
    when below, and freezes it as soon as a block lands inside the window.
    """

    n_iter: int = 50_000
    proposal_scale: float = 0.05
    proposal_floor: float = 1e-3
    proposal_std: tuple[float, ...] | None = None
    burn_in: float = 0.2
    thin: int = 5
    target: tuple[float, float] = (0.40, 0.50)
    tuning_steps: int = 2_000
    tuning_block: int = 100
    tuning_factor: float = 1.5
    prior_rel_std: float = 0.25
    prior_floor: float = 0.1
    flat_prior: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n_iter < 1 or self.thin < 1:
            raise ValueError("n_iter and thin must be >= 1")
        if not 0.0 <= self.burn_in <= 0.5:
            raise ValueError("burn_in must lie in [0, 0.5]")
        if self.proposal_scale <= 0 or self.proposal_floor <= 0:
            raise ValueError("proposal scale and floor must be > 0")
        if self.proposal_std is not None:
            object.__setattr__(self, "proposal_std", tuple(float(x) for x in self.proposal_std))
            if any(not s > 0 for s in self.proposal_std):
                raise ValueError("proposal std must be > 0 componentwise")
        lo, hi = self.target
        if not 0.0 < lo < hi < 1.0:
            raise ValueError("target acceptance window must satisfy 0 < lo < hi < 1")
        if self.tuning_steps < 0 or self.tuning_block < 1 or self.tuning_factor <= 1.0:
            raise ValueError("invalid tuning schedule")
        if self.prior_rel_std <= 0 or self.prior_floor <= 0:
            raise ValueError("prior std settings must be > 0")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "MHConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown MHConfig fields {sorted(unknown)}")
        d = dict(d)
        if "target" in d:
            d["target"] = tuple(d["target"])
        return cls(**d)


@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError("prior covariance shape does not match the mean")
        if not np.allclose(cov, cov.T):
            raise ValueError("prior covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("prior covariance must be positive definite") from None
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", chol)

    @classmethod
    def default(cls, theta, rel_std: float = 0.25, floor: float = 0.1) -> "GaussianPrior":
        theta = np.asarray(theta, dtype=float)
        std = np.maximum(rel_std * np.abs(theta), floor)
        return cls(theta, np.diag(std**2))

    def logpdf(self, theta) -> float:
        z = np.linalg.solve(self._chol, np.asarray(theta, dtype=float) - self.mean)
        return float(-0.5 * z @ z)


def log_target(sse: float, prior: GaussianPrior | None, theta) -> float:
    """``-SSE/2 + log p_prior(theta)`` up to a constant; ``-inf`` when the SSE is not finite."""
    if not np.isfinite(sse):
        return float("-inf")
    lp = -0.5 * float(sse)
    if prior is not None:
        lp += prior.logpdf(theta)
    return lp


@dataclass
class PosteriorSampleSet:
    samples: np.ndarray
    acceptance_rate: float
    proposal_std: np.ndarray
    chain: np.ndarray
    accepted: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.samples.std(axis=0, ddof=1) if len(self.samples) > 1 else np.zeros(self.samples.shape[1])

    def mode(self, bins: int = 50) -> np.ndarray:
        """Histogram-peak estimate per parameter."""
        out = []
        for j in range(self.samples.shape[1]):
            x = self.samples[:, j]
            if np.ptp(x) == 0:
                out.append(float(x[0]))
                continue
            counts, edges = np.histogram(x, bins=bins)
            k = int(np.argmax(counts))
            out.append(0.5 * (edges[k] + edges[k + 1]))
        return np.array(out)

    def summary(self) -> list[dict]:
        mode = self.mode()
        return [
            {"param": f"p{j + 1}", "mode": float(mode[j]), "mean": float(self.mean[j]), "std": float(self.std[j])}
            for j in range(self.samples.shape[1])
        ]

    def samples_csv(self) -> str:
        """Recorded chain, one row per sampling-phase iteration."""
        d = self.chain.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", *(f"param_{j + 1}" for j in range(d)), "accepted"])
        for i, (row, acc) in enumerate(zip(self.chain, self.accepted)):
            w.writerow([i, *(repr(float(x)) for x in row), int(acc)])
        return buf.getvalue()


def autocorrelation(x: np.ndarray, lag: int = 1) -> float:
    x = np.asarray(x, dtype=float)
    if x.size <= lag + 1:
        return float("nan")
    x = x - x.mean()
    denom = float(x @ x)
    if denom == 0.0:
        return 0.0
    return float(x[:-lag] @ x[lag:] / denom)


def batch_means_se(x: np.ndarray, n_batches: int = 30) -> float:
    """Monte-Carlo standard error of the mean of a correlated series by batch means."""
    x = np.asarray(x, dtype=float)
    m = x.size // n_batches
    if m < 1:
        return float("nan")
    means = x[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(n_batches))


def metropolis_hastings(logp: Callable[[np.ndarray], float], theta0, cfg: MHConfig) -> PosteriorSampleSet:
    """Random-walk sampler with the non-negativity clamp ``theta' = max(theta', 0)``.

    The tuning phase is not recorded and does not count toward the acceptance
    rate; the recorded chain uses the frozen proposal only.
    """
    rng = np.random.default_rng(cfg.seed)
    theta = np.maximum(np.asarray(theta0, dtype=float), 0.0)
    d = theta.size
    if d == 0:
        raise ValueError("model has no parameters to sample")
    if cfg.proposal_std is not None:
        if len(cfg.proposal_std) != d:
            raise ValueError("proposal_std length does not match the parameter count")
        sigma = np.array(cfg.proposal_std, dtype=float)
    else:
        sigma = np.maximum(cfg.proposal_scale * np.abs(theta), cfg.proposal_floor)
    lp = logp(theta)
    if not np.isfinite(lp):
        raise ValueError("log-target is not finite at the starting point")

    def step(theta, lp, sigma):
        prop = np.maximum(theta + sigma * rng.standard_normal(d), 0.0)
        lq = logp(prop)
        if np.isfinite(lq) and (lq >= lp or rng.random() < math.exp(lq - lp)):
            return prop, lq, True
        return theta, lp, False

    lo, hi = cfg.target
    tuning = []
    reached = cfg.tuning_steps == 0
    best = (float("inf"), sigma.copy(), float("nan"))
    done = 0
    while done < cfg.tuning_steps and not reached:
        n = min(cfg.tuning_block, cfg.tuning_steps - done)
        acc = 0
        for _ in range(n):
            theta, lp, a = step(theta, lp, sigma)
            acc += a
        done += n
        rate = acc / n
        tuning.append({"proposals": done, "acceptance": rate, "scale": [float(s) for s in sigma]})
        gap = 0.0 if lo <= rate <= hi else min(abs(rate - lo), abs(rate - hi))
        if gap < best[0]:
            best = (gap, sigma.copy(), rate)
        if gap == 0.0:
            reached = True
        elif rate > hi:
            sigma = sigma * cfg.tuning_factor
        else:
            sigma = sigma / cfg.tuning_factor
    if not reached:
        sigma = best[1]

    chain = np.empty((cfg.n_iter, d))
    accepted = np.zeros(cfg.n_iter, dtype=bool)
    for i in range(cfg.n_iter):
        theta, lp, accepted[i] = step(theta, lp, sigma)
        chain[i] = theta
    start = int(math.floor(cfg.burn_in * cfg.n_iter))
    kept = chain[start:: cfg.thin]
    rate = float(accepted.mean())
    diag = {
        "acceptance_rate": rate,
        "sampling_proposals": cfg.n_iter,
        "tuning_proposals": done,
        "tuning_reached_window": bool(reached),
        "tuning_trace": tuning,
        "proposal_std": [float(s) for s in sigma],
        "burn_in": start,
        "thin": cfg.thin,
        "kept": int(len(kept)),
        "lag1_autocorrelation": [autocorrelation(kept[:, j]) for j in range(d)],
    }
    return PosteriorSampleSet(kept, rate, sigma, chain, accepted, diag)


def sample(tree: Node, experiments: Sequence[ExperimentDataset], stoichiometry: Sequence[float],
           theta_star, cfg: MHConfig | None = None, prior: GaussianPrior | None = None) -> PosteriorSampleSet:
    """Posterior over ``theta`` for a fixed rate law, started at the fitted ``theta_star``.

    The likelihood term is ``exp(-SSE/2)`` with the concentration-space SSE of
    the integrated model (penalties excluded). Unless ``cfg.flat_prior`` is
    set, a diagonal Gaussian prior centred on ``theta_star`` is used.
    """
    cfg = cfg or MHConfig()
    theta_star = np.asarray(theta_star, dtype=float)
    if prior is None and not cfg.flat_prior:
        prior = GaussianPrior.default(theta_star, cfg.prior_rel_std, cfg.prior_floor)
    obj = DynamicObjective(tree, experiments, stoichiometry)

    def logp(theta):
        return log_target(obj.sse(theta), prior, theta)

    out = metropolis_hastings(logp, theta_star, cfg)
    out.diagnostics["prior"] = None if prior is None else {
        "mean": [float(x) for x in prior.mean],
        "std": [float(math.sqrt(prior.cov[j, j])) for j in range(prior.mean.size)],
    }
    out.diagnostics["summary"] = out.summary()
    return out


@dataclass
class Bands:
    experiment_ids: list[int]
    times: list[np.ndarray]
    species: tuple[str, ...]
    mean: list[np.ndarray]
    std: list[np.ndarray]
    k: int
    n_draws: list[int]

    def lower(self, i: int) -> np.ndarray:
        return self.mean[i] - self.k * self.std[i]

    def upper(self, i: int) -> np.ndarray:
        return self.mean[i] + self.k * self.std[i]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        k = self.k
        w.writerow(["experiment_id", "time_h", "species", "mean", f"lo_{k}", f"hi_{k}"])
        for i, eid in enumerate(self.experiment_ids):
            lo, hi = self.lower(i), self.upper(i)
            for a, t in enumerate(self.times[i]):
                for s, name in enumerate(self.species):
                    w.writerow([eid, repr(float(t)), name, repr(float(self.mean[i][a, s])),
                                repr(float(lo[a, s])), repr(float(hi[a, s]))])
        return buf.getvalue()


def propagate(tree: Node, samples: np.ndarray, experiments: Sequence[ExperimentDataset],
              stoichiometry: Sequence[float], band_k: int = 3, n_draws: int = 200,
              times: Sequence[np.ndarray] | None = None) -> Bands:
    """Mean and ``mean +/- k std`` envelopes of trajectories under posterior draws.

    Draws are taken at evenly spaced positions of the sample array, so the
    result is deterministic. Draws that fail to integrate are skipped.
    """
    if band_k not in (1, 2, 3):
        raise ValueError("band_k must be 1, 2 or 3")
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.size == 0:
        raise ValueError("no samples to propagate")
    from .kinetics import IntegrationError, RateModel

    species = experiments[0].species
    model = RateModel(tree, species, stoichiometry)
    idx = np.unique(np.linspace(0, len(samples) - 1, min(n_draws, len(samples))).round().astype(int))
    draws = samples[idx]
    ids, grids, means, stds, counts = [], [], [], [], []
    for j, e in enumerate(experiments):
        grid = np.asarray(e.times if times is None else times[j], dtype=float)
        trajs = []
        for theta in draws:
            try:
                trajs.append(model.integrate(theta, e.x0[None, :], grid)[0])
            except IntegrationError:
                continue
        if not trajs:
            raise PropagationError(f"no posterior draw integrates for experiment {e.experiment_id}")
        arr = np.array(trajs)
        ids.append(e.experiment_id)
        grids.append(grid)
        means.append(arr.mean(axis=0))
        stds.append(arr.std(axis=0))
        counts.append(len(trajs))
    return Bands(ids, grids, tuple(species), means, stds, band_k, counts)
