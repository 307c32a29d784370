"""``kindisc`` command line.

Exit codes: 0 success, 2 configuration error, 3 pipeline error, 4 budget
exhausted without a structural match in benchmark mode.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _io, __version__
from .config import ConfigError, RunConfig, load_config
from .kinetics import IntegrationError, RateModel
from .pipeline import BUDGET_EXHAUSTED, PipelineError, discover, load_state
from .simulate import datasets_to_csv, run_designed
from .uq import PropagationError, propagate, sample

__all__ = ["main", "build_parser"]

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_NO_MATCH = 0, 2, 3, 4

log = logging.getLogger("kindisc")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kindisc", description="Kinetic rate-law discovery from batch data.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=("simulate", "discover", "uq", "report"))
    p.add_argument("--config", help="run configuration (JSON)")
    p.add_argument("--out", help="output or run directory (default runs/<name>)")
    p.add_argument("--resume", metavar="DIR", help="existing run directory; its config.json is used")
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-series searches")
    p.add_argument("--seed-override", action="append", default=[], metavar="K=V",
                   help="override a named seed, e.g. gp_seed=3 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def _overrides(items: Sequence[str]) -> dict[str, int]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError("--seed-override", f"expected K=V, got {item!r}")
        try:
            out[key.strip()] = int(value)
        except ValueError:
            raise ConfigError(f"seeds.{key.strip()}", f"seed must be an integer, got {value!r}") from None
        if out[key.strip()] < 0:
            raise ConfigError(f"seeds.{key.strip()}", "seed must be >= 0")
    return out


def _resolve(args) -> tuple[RunConfig, Path]:
    """Configuration and run directory for a command."""
    if args.resume:
        run_dir = Path(args.resume)
        cfg_path = Path(args.config) if args.config else run_dir / "config.json"
    else:
        if not args.config:
            if args.command in ("uq", "report") and args.out:
                run_dir = Path(args.out)
                cfg_path = run_dir / "config.json"
                cfg = load_config(cfg_path)
                return cfg.with_seeds(**_overrides(args.seed_override)), run_dir
            raise ConfigError("--config", "a configuration file (or --resume DIR) is required")
        cfg_path = Path(args.config)
        run_dir = None
    cfg = load_config(cfg_path)
    cfg = cfg.with_seeds(**_overrides(args.seed_override))
    if run_dir is None:
        run_dir = Path(args.out) if args.out else Path("runs") / cfg.name
    return cfg, run_dir


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    exps = run_designed(cfg.case, cfg.seeds.noise_seed)
    out.mkdir(parents=True, exist_ok=True)
    _io.write_text(out / "datasets.csv", datasets_to_csv(exps))
    _io.write_json(out / "config.json", cfg.to_dict())
    print(f"wrote {sum(e.n_measurements for e in exps)} measurements from {len(exps)} experiments "
          f"to {out / 'datasets.csv'}")
    return EXIT_OK


def cmd_discover(cfg: RunConfig, run_dir: Path, resume: bool, threads: int) -> int:
    if resume and (run_dir / "config.json").exists():
        persisted = _io.read_json(run_dir / "config.json")
        if _io.dumps(persisted) != _io.dumps(cfg.to_dict()):
            raise ConfigError("--resume", "settings differ from the configuration persisted in the run directory")
    state = discover(cfg, run_dir=run_dir, resume=resume, threads=threads)
    report = state.report()
    print(_io.dumps(report), end="")
    if cfg.mode == "benchmark" and state.stop_reason == BUDGET_EXHAUSTED and not state.match:
        return EXIT_NO_MATCH
    return EXIT_OK


def _finished(cfg: RunConfig, run_dir: Path):
    state = load_state(run_dir, cfg)
    if state is None or state.best is None:
        raise PipelineError(f"{run_dir} contains no completed round with a selected model")
    return state


def cmd_uq(cfg: RunConfig, run_dir: Path) -> int:
    state = _finished(cfg, run_dir)
    best = state.best
    mh = replace(cfg.uq.mh, seed=cfg.seeds.mh_seed)
    result = sample(best.model, state.experiments, cfg.case.stoichiometry, best.theta, mh)
    try:
        bands = propagate(best.model, result.samples, state.experiments, cfg.case.stoichiometry,
                          cfg.uq.band_k, cfg.uq.n_draws)
    except PropagationError as exc:
        raise PipelineError(f"uncertainty propagation failed: {exc}") from None
    out = run_dir / "uq"
    _io.write_text(out / "samples.csv", result.samples_csv())
    _io.write_text(out / "bands.csv", bands.to_csv())
    _io.write_json(out / "diagnostics.json", {
        "model": best.expression,
        "theta_star": [float(x) for x in best.theta],
        "acceptance_rate": result.acceptance_rate,
        "mode": [float(x) for x in result.mode()],
        "mean": [float(x) for x in result.mean],
        "std": [float(x) for x in result.std],
        "n_samples": int(len(result.samples)),
        "band_k": cfg.uq.band_k,
        "draws_per_experiment": bands.n_draws,
        "diagnostics": result.diagnostics,
    })
    print(f"acceptance {result.acceptance_rate:.3f}; wrote {out}")
    return EXIT_OK


def _fits_csv(cfg: RunConfig, state) -> str:
    best = state.best
    model = RateModel(best.model, cfg.case.species, cfg.case.stoichiometry)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment_id", "time_h", "species", "observed", "predicted"])
    for e in state.experiments:
        try:
            pred = model.integrate(best.theta, e.x0[None, :], e.times)[0]
        except IntegrationError:
            pred = np.full_like(e.values, np.nan)
        for a, t in enumerate(e.times):
            for s, name in enumerate(e.species):
                w.writerow([e.experiment_id, repr(float(t)), name, repr(float(e.values[a, s])),
                            repr(float(pred[a, s]))])
    return buf.getvalue()


def cmd_report(cfg: RunConfig, run_dir: Path) -> int:
    state = _finished(cfg, run_dir)
    report = state.report()
    _io.write_json(run_dir / "report.json", report)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "n_experiments", "aic", "model", "match"])
    for r in state.rounds:
        w.writerow([r.index, len(r.experiment_ids), repr(float(r.best.aic)), r.best.expression, r.match])
    _io.write_text(run_dir / "aic_trace.csv", buf.getvalue())
    _io.write_text(run_dir / "fits.csv", _fits_csv(cfg, state))
    print(_io.dumps(report), end="")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg, run_dir = _resolve(args)
        if args.command == "simulate":
            return cmd_simulate(cfg, run_dir)
        if args.command == "discover":
            return cmd_discover(cfg, run_dir, bool(args.resume), args.threads)
        if args.command == "uq":
            return cmd_uq(cfg, run_dir)
        return cmd_report(cfg, run_dir)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
