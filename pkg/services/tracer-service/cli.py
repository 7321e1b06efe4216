"""
Command line entry point

    python cli.py check --config configs/rm3.toml
    python cli.py covariance --config configs/rm3.toml --out out/rm3
    python cli.py simulate --config configs/stable_like.toml --pilot
    python cli.py lln --config configs/rm3.toml --workers 8
    python cli.py clt --config configs/rm3.toml --seed 7

Exit codes: 0 success, 1 verdict or hard-check failure, 2 usage or
configuration error, 3 numerical failure.
"""

import argparse
from dataclasses import dataclass
import logging
import sys
import time
from typing import Optional

import numpy as np

from config import LOG_FORMAT, LOG_LEVEL, SERVICE_NAME, VERSION
from errors import CheckFailedError, ConfigError, TracerError
from models import CheckResult, CovarianceReport, TracerModel
from services.config_loader import ExperimentConfig, load_experiment
from services.ergodic import ErgodicService
from services.generator import GeneratorService
from services.reports import ReportWriter, load_pilot, render_table, save_pilot
from services.simulate import PathSimulator, RunSpec
from services.stats import JumpIncrement, StatsService
from services.symbols import SymbolService
from utils.logger import setup_logger

logger = logging.getLogger(SERVICE_NAME)

EXIT_OK = 0
EXIT_VERDICT = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


@dataclass
class Toolkit:
    """One shared instance of every service for a command run"""

    symbols: SymbolService
    generator: GeneratorService
    simulator: PathSimulator
    ergodic: ErgodicService
    stats: StatsService

    @classmethod
    def create(cls, convention: str = "per_axis") -> "Toolkit":
        symbols = SymbolService(convention=convention)
        generator = GeneratorService(symbols)
        simulator = PathSimulator(generator)
        return cls(
            symbols=symbols,
            generator=generator,
            simulator=simulator,
            ergodic=ErgodicService(generator, simulator),
            stats=StatsService(simulator),
        )


def _emit(experiment: ExperimentConfig, text: str):
    if "text" in experiment.output.formats:
        print(text)


def _writer(experiment: ExperimentConfig, command: str) -> ReportWriter:
    return ReportWriter(
        experiment.output.dir,
        experiment.config_hash,
        experiment.run.seed,
        command,
        experiment.output.formats,
    )


def _require_tracer(experiment: ExperimentConfig, command: str) -> TracerModel:
    if experiment.tracer is None:
        raise ConfigError(f"{command} needs a [tracer] table with test functions")
    return experiment.tracer


def _checks_table(results: list) -> str:
    rows = [
        (r.check, r.status, "hard" if r.hard else "soft", "" if r.value is None else r.value,
         "" if r.k0 is None else str(tuple(r.k0)), "; ".join(r.notes))
        for r in results
    ]
    return render_table(["check", "status", "kind", "value", "k0", "notes"], rows)


# ----------------------------------------------------------------------
# check
# ----------------------------------------------------------------------
def run_checks(experiment: ExperimentConfig, kit: Toolkit) -> list[CheckResult]:
    """Every applicable checker; hard ones decide the exit code"""
    model = experiment.model
    checks = experiment.checks
    results = list(kit.symbols.check_structural_conditions(model))
    period = model.period
    if period is None and experiment.tracer is not None:
        period = experiment.tracer.period
    if model.is_levy and period is not None:
        results.append(
            kit.symbols.check_ergodicity_condition(model, period, checks.k_max, checks.convention)
        )
        results.append(kit.symbols.check_strong_ergodicity_hint(model, period, checks.k_max))
        for w in experiment.functions:
            result = kit.symbols.check_summability(w, model, convention=checks.convention)
            result.check = f"summability[{w.label}]"
            results.append(result)
    evaluable = model.jumps is None or model.jumps.evaluable
    if evaluable:
        results.append(kit.symbols.check_sector_condition(model))
        results.append(
            kit.symbols.check_heat_kernel_integrability(model, checks.heat_kernel_t, checks.heat_kernel_cutoff)
        )
    else:
        logger.warning(f"{model.name}: symbol is not evaluable, sector and heat kernel checks skipped")
    return results


def hard_failures(results: list[CheckResult]) -> list[CheckResult]:
    return [r for r in results if r.hard and not r.passed]


def cmd_check(experiment: ExperimentConfig, args, kit: Toolkit) -> int:
    results = run_checks(experiment, kit)
    failed = hard_failures(results)
    writer = _writer(experiment, "check")
    writer.write_json(
        "check",
        {
            "model": experiment.model.to_dict(),
            "checks": [r.to_dict() for r in results],
            "verdict": "fail" if failed else "pass",
        },
    )
    writer.write_csv(
        "check",
        ["check", "status", "hard", "value", "k0"],
        [(r.check, r.status, r.hard, r.value, "" if r.k0 is None else " ".join(map(str, r.k0))) for r in results],
    )
    writer.write_manifest()
    _emit(experiment, _checks_table(results))
    for r in failed:
        logger.error(f"hard check {r.check} failed", extra={"error": r.status})
    return EXIT_VERDICT if failed else EXIT_OK


# ----------------------------------------------------------------------
# covariance
# ----------------------------------------------------------------------
def _invariant_measure(experiment: ExperimentConfig, args, kit: Toolkit, writer: Optional[ReportWriter] = None):
    """Uniform for Levy drivers, otherwise a stored or freshly computed pilot histogram"""
    model = experiment.model
    if model.is_levy:
        return "uniform"
    histogram = load_pilot(experiment.output.dir, experiment.raw["model"])
    if histogram is not None:
        return histogram
    if not getattr(args, "pilot", False):
        raise ConfigError(
            f"{model.name} is state dependent and no pilot histogram was found in "
            f"{experiment.output.dir}; run `simulate --pilot` with this configuration first "
            "or pass --pilot to compute it inline"
        )
    histogram = kit.ergodic.pilot_histogram(
        model, experiment.run.seed, horizon=experiment.checks.pilot_horizon,
        dt=experiment.run.dt, bins=experiment.checks.pilot_bins,
    )
    if writer is not None:
        save_pilot(writer, histogram, experiment.raw["model"])
    return histogram


def _guard(experiment: ExperimentConfig, args, kit: Toolkit):
    """Refuse to continue past failing hard checks unless --force"""
    if getattr(args, "force", False):
        return
    failed = hard_failures(run_checks(experiment, kit))
    if failed:
        names = ", ".join(r.check for r in failed)
        raise CheckFailedError(f"hard checks failed ({names}); rerun with --force to continue anyway")


def theoretical_covariance(experiment: ExperimentConfig, args, kit: Toolkit, writer=None) -> tuple:
    """(series report or None, quadrature report)"""
    tm = experiment.tracer
    invariant = _invariant_measure(experiment, args, kit, writer)
    series = None
    if experiment.model.is_levy:
        series = kit.ergodic.covariance_series(experiment.model, tm.functions, tm.noise_cov)
    quadrature = kit.ergodic.covariance_quadrature(
        experiment.model, tm.functions, tm.noise_cov, invariant=invariant,
        grid=experiment.checks.quadrature_grid,
    )
    return series, quadrature


def _covariance_rows(report: CovarianceReport):
    d = report.total.shape[0]
    for i in range(d):
        for j in range(d):
            yield (report.method, i + 1, j + 1, report.sigma[i, j], report.ergodic[i, j], report.total[i, j])


def cmd_covariance(experiment: ExperimentConfig, args, kit: Toolkit) -> int:
    _require_tracer(experiment, "covariance")
    _guard(experiment, args, kit)
    writer = _writer(experiment, "covariance")
    series, quadrature = theoretical_covariance(experiment, args, kit, writer)
    reports = [r for r in (series, quadrature) if r is not None]
    discrepancy = None
    if series is not None:
        discrepancy = float(np.abs(series.ergodic - quadrature.ergodic).max())
    for r in reports:
        writer.write_json(f"covariance_{r.method}", r.to_dict())
    writer.write_json(
        "covariance",
        {"reports": [r.to_dict() for r in reports], "max_discrepancy": discrepancy},
    )
    rows = [row for r in reports for row in _covariance_rows(r)]
    header = ["method", "i", "j", "sigma", "ergodic", "total"]
    writer.write_csv("covariance", header, rows)
    writer.write_manifest()
    _emit(experiment, render_table(header, rows))
    if discrepancy is not None:
        _emit(experiment, f"max |series - quadrature| = {discrepancy:.3e}")
    return EXIT_OK


# ----------------------------------------------------------------------
# simulate
# ----------------------------------------------------------------------
def cmd_simulate(experiment: ExperimentConfig, args, kit: Toolkit) -> int:
    run = experiment.run
    model = experiment.model
    writer = _writer(experiment, "simulate")
    summary: dict = {"model": model.to_dict()}
    verdict = True

    if args.pilot:
        if model.period is None:
            raise ConfigError("--pilot needs a periodic model")
        histogram = kit.ergodic.pilot_histogram(
            model, run.seed, horizon=experiment.checks.pilot_horizon, dt=run.dt,
            bins=experiment.checks.pilot_bins,
        )
        save_pilot(writer, histogram, experiment.raw["model"])
        centres = histogram.bin_centres()
        writer.write_csv(
            "pilot_histogram",
            [f"x_{j + 1}" for j in range(histogram.dim)] + ["mass"],
            [list(c) + [m] for c, m in zip(centres.tolist(), histogram.mass.ravel().tolist())],
        )
        summary["pilot"] = {"tv_to_uniform": histogram.tv_to_uniform(), "bins": histogram.bins}

    if args.tv:
        report = kit.ergodic.tv_decay_estimate(
            model, experiment.checks.tv_times, run.seed, n_paths=experiment.checks.tv_paths,
            dt=run.dt, period=model.period or (experiment.tracer.period if experiment.tracer else None),
            workers=run.workers,
        )
        summary["tv_decay"] = report.to_dict()
        writer.write_csv(
            "tv_decay", ["t", "tv", "noise_floor"], zip(report.times, report.tv, report.noise_floor)
        )

    spec = RunSpec(
        model=model, tracer=experiment.tracer, n_paths=run.n_paths, dt=run.dt, horizon=run.horizon,
        seed=run.seed, method=run.method,
    )
    finals, increments = [], []
    dumps = experiment.output.paths
    jump_reducer = JumpIncrement(experiment.functions) if experiment.tracer is not None else None
    for path_id, item in kit.simulator.ensemble(spec, workers=run.workers):
        if experiment.tracer is None:
            finals.append(item.states[-1])
            continue
        finals.append(item.values[-1])
        increments.append(jump_reducer(path_id, item))
        if path_id < dumps:
            writer.write_path(path_id, item)
    finals = np.stack(finals)
    summary["terminal"] = kit.stats.ensemble_stats(finals).to_dict() if len(finals) > 1 else {
        "mean": finals.mean(axis=0).tolist()
    }

    if experiment.tracer is not None:
        tm = experiment.tracer
        cap = kit.stats.jump_cap_check(increments, tm, n=run.horizon, dt=run.dt)
        summary["jump_cap"] = cap.to_dict()
        verdict &= cap.passed
        if model.jumps is None or model.jumps.evaluable:
            dynkin = kit.stats.dynkin_check(
                model, tm.functions, run.seed, n_paths=experiment.checks.dynkin_paths,
                horizon=experiment.checks.dynkin_horizon, dt=run.dt, workers=run.workers,
            )
            summary["dynkin"] = [r.to_dict() for r in dynkin]
            verdict &= all(r.passed for r in dynkin)
            writer.write_csv(
                "dynkin", ["label", "mean", "stderr", "n_paths", "passed"],
                [(r.label, r.mean, r.stderr, r.n_paths, r.passed) for r in dynkin],
            )
    summary["verdict"] = "pass" if verdict else "fail"
    writer.write_json("simulate", summary)
    writer.write_csv(
        "terminal", [f"value_{i + 1}" for i in range(finals.shape[1])], finals.tolist()
    )
    writer.write_manifest(n_paths=run.n_paths)
    _emit(experiment, f"simulated {run.n_paths} paths to T={run.horizon}: {summary['verdict']}")
    return EXIT_OK if verdict else EXIT_VERDICT


# ----------------------------------------------------------------------
# lln / clt
# ----------------------------------------------------------------------
def lln_verdict(report) -> bool:
    means = np.array([r.mean_deviation for r in report.rungs])
    bounds = [r.bound for r in report.rungs]
    if all(b is not None for b in bounds):
        return bool(np.all(means <= np.array(bounds) * (1 + 1e-9) + 1e-12))
    if np.all(means <= 1e-12):
        return True
    return report.decreasing


def cmd_lln(experiment: ExperimentConfig, args, kit: Toolkit) -> int:
    tm = _require_tracer(experiment, "lln")
    _guard(experiment, args, kit)
    run = experiment.run
    report = kit.stats.lln_experiment(
        tm, run.ladder, run.seed, t=run.t, paths_per_rung=run.paths_per_rung, dt=run.dt, workers=run.workers,
    )
    verdict = lln_verdict(report)
    writer = _writer(experiment, "lln")
    writer.write_json("lln", {**report.to_dict(), "verdict": "pass" if verdict else "fail"})
    header = ["n", "mean_deviation", "stderr", "bound"]
    rows = [(r.n, r.mean_deviation, r.stderr, r.bound) for r in report.rungs]
    writer.write_csv("lln", header, rows)
    writer.write_manifest(n_paths=run.paths_per_rung * len(run.ladder))
    _emit(experiment, render_table(header, rows))
    if report.slope is not None:
        _emit(experiment, f"log-log slope {report.slope:.3f}")
    return EXIT_OK if verdict else EXIT_VERDICT


def cmd_clt(experiment: ExperimentConfig, args, kit: Toolkit) -> int:
    tm = _require_tracer(experiment, "clt")
    _guard(experiment, args, kit)
    run = experiment.run
    writer = _writer(experiment, "clt")
    series, quadrature = theoretical_covariance(experiment, args, kit, writer)
    covariance = series or quadrature
    report = kit.stats.clt_experiment(
        tm, covariance, run.n, run.seed, times=run.times, n_paths=run.n_paths, dt=run.dt, workers=run.workers,
    )
    writer.write_json("clt", {**report.to_dict(), "covariance": covariance.to_dict()})
    header = ["t", "i", "empirical_var", "theoretical_var", "ks_p"]
    rows = []
    for row in report.rows:
        pvalues = iter(row.stats.ks)
        for i in range(row.theoretical.shape[0]):
            theory = row.theoretical[i, i]
            ks = next(pvalues) if theory > 0 else None
            rows.append((row.t, i + 1, row.stats.covariance[i, i], theory, None if ks is None else ks.pvalue))
    writer.write_csv("clt", header, rows)
    writer.write_manifest(n_paths=run.n_paths)
    _emit(experiment, render_table(header, rows))
    _emit(experiment, f"verdict: {'pass' if report.verdict else 'fail'}")
    return EXIT_OK if report.verdict else EXIT_VERDICT


COMMANDS = {
    "check": cmd_check,
    "covariance": cmd_covariance,
    "simulate": cmd_simulate,
    "lln": cmd_lln,
    "clt": cmd_clt,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tracer", description="Limit theorems for tracers driven by diffusions with jumps"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    parser.add_argument("--log-level", default=LOG_LEVEL)
    parser.add_argument("--log-format", default=LOG_FORMAT, choices=["json", "text"])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="TOML experiment file")
        cmd.add_argument("--seed", type=int, help="overrides run.seed")
        cmd.add_argument("--workers", type=int, help="worker processes; results do not depend on it")
        cmd.add_argument("--out", help="output directory, overrides output.dir")
        cmd.add_argument("--force", action="store_true", help="continue past failing hard checks")
        cmd.add_argument("--pilot", action="store_true", help="compute the pilot invariant histogram")
        if name == "simulate":
            cmd.add_argument("--tv", action="store_true", help="estimate total-variation decay")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    setup_logger(SERVICE_NAME, level=args.log_level, fmt=args.log_format)
    started = time.perf_counter()
    try:
        experiment = load_experiment(args.config, seed=args.seed, workers=args.workers, out_dir=args.out)
        kit = Toolkit.create(experiment.checks.convention)
        logger.info(
            f"running {args.command} on {experiment.name}",
            extra={"command": args.command, "config_hash": experiment.config_hash, "seed": experiment.run.seed},
        )
        code = COMMANDS[args.command](experiment, args, kit)
    except TracerError as e:
        logger.error(f"{args.command} failed: {e}", extra={"command": args.command, "error": type(e).__name__})
        return e.exit_code
    except Exception as e:
        logger.exception(f"{args.command} crashed", extra={"command": args.command, "error": str(e)})
        return EXIT_NUMERICAL
    logger.info(
        f"{args.command} finished with exit code {code}",
        extra={"command": args.command, "elapsed": round(time.perf_counter() - started, 3)},
    )
    return code


if __name__ == "__main__":
    sys.exit(main())
