"""Command-line entry point: simulate, replicate, analyze, demo-noncollapsibility, limits."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path

import pandas as pd

from .audit import timed_operation
from .comparators import g_population_limit, ols_population_limit, pooled_logistic_mle, pooled_ols
from .config import FormulaConfig, get_settings, load_model_json
from .errors import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, ConfigError, EstimandsError, create_error_response
from .estimators import (
    Estimand,
    EstimateReport,
    Method,
    Scale,
    estimate,
    fit_nuisance,
    propensity_scores,
    reports_frame,
    trial_contrasts,
)
from .glm import Link
from .logging_config import run_context, setup_logging
from .panel import Design, OutcomeFamily, PanelDataset, emit_long_csv, ingest_long_csv, positivity_diagnostics
from .pool import WorkerPool
from .registry import EstimatorRegistry
from .simgen import DgpSpec, generate
from .simgen.noncollapsibility import run_noncollapsibility_demo
from .simgen.oracles import estimand_limit_oracle
from .simgen.replicate import replicate_study

logger = logging.getLogger(__name__)

DESIGNS = {"visit": Design.VISIT_TIME, "calendar": Design.CALENDAR_TIME}
SCALES = {"rd": Scale.RISK_DIFFERENCE, "logodds": Scale.LOG_ODDS}
ANALYZE_TRUNCATION = 95.0


def _truncation(value: str) -> float | None:
    if value.lower() == "none":
        return None
    try:
        percentile = float(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected a percentile or 'none', got '{value}'") from e
    if not 0.0 < percentile <= 100.0:
        raise argparse.ArgumentTypeError("truncation percentile must lie in (0, 100]")
    return percentile


def _sibling(out: Path, suffix: str) -> Path:
    """``results.csv`` -> ``results_<suffix>.csv`` next to it."""
    return out.with_name(f"{out.stem}_{suffix}{out.suffix or '.csv'}")


def _load_dgp(args: argparse.Namespace) -> DgpSpec:
    dgp = DgpSpec.from_json_file(args.config)
    if args.design is not None:
        dgp = dgp.model_copy(update={"design": DESIGNS[args.design]})
    return dgp


def _load_formulas(path: Path | None) -> FormulaConfig | None:
    return load_model_json(FormulaConfig, path) if path is not None else None


def _estimands(choice: str, design: Design) -> list[Estimand]:
    if choice != "all":
        return [Estimand(choice)]
    if design == Design.CALENDAR_TIME:
        return [Estimand.PSI_U, Estimand.PSI_E]
    return list(Estimand)


def _methods(choice: str) -> list[Method]:
    return [Method.IPW, Method.GCOMP] if choice == "all" else [Method(choice)]


def cmd_simulate(args: argparse.Namespace) -> int:
    """Write one simulated long-format CSV plus its counterfactual table."""
    if args.n < 1:
        raise ConfigError("--n must be at least 1")
    dgp = _load_dgp(args)
    data = generate(dgp, args.n, args.seed)
    emit_long_csv(data.dataset, args.out)
    if data.counterfactuals is not None:
        cf_path = _sibling(args.out, "counterfactuals")
        data.counterfactuals.to_csv(cf_path, index=False, float_format="%.17g", lineterminator="\n")
        logger.info(f"Wrote {len(data.counterfactuals)} counterfactual rows to {cf_path}")
    logger.info(f"Wrote {data.dataset.n_rows} rows to {args.out}")
    return EXIT_OK


def cmd_replicate(args: argparse.Namespace) -> int:
    """Monte Carlo study of every estimator that applies to the configured design."""
    if args.reps < 1:
        raise ConfigError("--reps must be at least 1")
    settings = get_settings()
    dgp = _load_dgp(args)
    links = (Link.LOGIT, Link.PROBIT) if dgp.panel_family == OutcomeFamily.BINARY else None
    estimators = EstimatorRegistry.default().for_design(dgp.design, dgp.panel_family, links)

    mc_n = args.mc_n or settings.oracle_mc_n
    wanted = [Estimand.PSI_U, Estimand.PSI_E] if dgp.design == Design.CALENDAR_TIME else [Estimand.PSI_B]
    targets = {e.value: estimand_limit_oracle(dgp, e, mc_n, args.seed).limit for e in wanted}

    table = replicate_study(
        dgp,
        estimators,
        args.reps,
        args.n,
        args.seed,
        targets,
        formulas=_load_formulas(args.formulas),
        truncation=args.truncate,
        settings=settings,
    )
    table.to_csv(args.out)
    if table.failures:
        print(f"{table.failures} of {args.reps} replications failed and were excluded", file=sys.stderr)
    logger.info(f"Wrote {len(table.rows)} summary rows to {args.out}")
    return EXIT_OK


def _analysis_reports(
    ds: PanelDataset,
    args: argparse.Namespace,
    formulas: FormulaConfig | None,
) -> tuple[list[EstimateReport], pd.DataFrame, pd.DataFrame]:
    estimands = _estimands(args.estimand, ds.design)
    methods = _methods(args.method)
    scale = SCALES[args.scale]
    baseline = Estimand.PSI_B in estimands and ds.design == Design.VISIT_TIME
    nuis = fit_nuisance(ds, formulas, baseline=baseline)

    reports = [
        estimate(
            ds,
            nuis,
            estimand,
            method,
            scale=scale,
            truncation=args.truncate if method == Method.IPW else None,
            level=args.level,
        )
        for estimand in estimands
        for method in methods
    ]
    terms = formulas.resolved(ds).comparator_terms if formulas is not None else None
    if ds.outcome_family == OutcomeFamily.CONTINUOUS:
        reports.append(pooled_ols(ds, terms, level=args.level))
    elif scale == Scale.LOG_ODDS:
        reports.append(pooled_logistic_mle(ds, terms, include_time=True, level=args.level))

    trials = pd.concat(
        [
            trial_contrasts(
                ds,
                nuis,
                method,
                estimand,
                truncation=args.truncate if method == Method.IPW else None,
            ).assign(estimand=estimand.value, method=method.value)
            for estimand in estimands
            for method in methods
        ],
        ignore_index=True,
    )
    positivity = positivity_diagnostics(ds, propensity_scores(ds, nuis), threshold=args.threshold)
    return reports, trials, positivity.to_frame()


def cmd_analyze(args: argparse.Namespace) -> int:
    """Estimate the requested estimands on an external person-time CSV."""
    ds = ingest_long_csv(args.data, design=DESIGNS[args.design])
    formulas = _load_formulas(args.formulas)
    reports, trials, positivity = _analysis_reports(ds, args, formulas)

    reports_frame(reports).to_csv(args.out, index=False, float_format="%.10g", lineterminator="\n")
    trials.to_csv(_sibling(args.out, "trials"), index=False, float_format="%.10g", lineterminator="\n")
    positivity.to_csv(_sibling(args.out, "positivity"), index=False, float_format="%.10g", lineterminator="\n")
    for report in reports:
        logger.info(f"{report.name}: {report.point:.4f} (SE {report.se:.4f})")
    return EXIT_OK


def cmd_demo_noncollapsibility(args: argparse.Namespace) -> int:
    """Per-trial marginal effect curves for binary and continuous outcomes."""
    if args.reps < 1:
        raise ConfigError("--reps must be at least 1")
    curves = run_noncollapsibility_demo(
        reps=args.reps, n=args.n, seed=args.seed, pool=WorkerPool.from_settings(get_settings())
    )
    curves.to_csv(args.out, index=False, float_format="%.10g", lineterminator="\n")
    return EXIT_OK


def cmd_limits(args: argparse.Namespace) -> int:
    """Population limits of the estimands and comparators as JSON records."""
    dgp = _load_dgp(args)
    mc_n = args.mc_n or get_settings().oracle_mc_n
    wanted = [Estimand.PSI_U, Estimand.PSI_E]
    if dgp.design == Design.VISIT_TIME:
        wanted.append(Estimand.PSI_B)

    limits = [estimand_limit_oracle(dgp, e, mc_n, args.seed) for e in wanted]
    if dgp.panel_family == OutcomeFamily.CONTINUOUS:
        formulas = _load_formulas(args.formulas)
        terms = formulas.comparator_terms if formulas is not None else None
        limits.append(ols_population_limit(dgp, mc_n, args.seed, terms))
    limits.append(g_population_limit(dgp, mc_n, args.seed))

    payload = json.dumps([limit.to_record() for limit in limits], indent=2)
    args.out.write_text(payload + "\n", encoding="utf-8")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trial-estimands",
        description="Model-free estimands for sequences of emulated target trials",
    )
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR (default LOG_LEVEL)")
    parser.add_argument("--log-format", choices=["json", "text"], default=None)
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler: Callable[[argparse.Namespace], int], help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text, description=help_text)
        sub.set_defaults(handler=handler)
        sub.add_argument("--seed", type=int, default=0, help="Master seed")
        sub.add_argument("--out", type=Path, required=True, help="Output path")
        return sub

    def dgp_flags(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", type=Path, required=True, help="DgpSpec JSON file")
        sub.add_argument("--design", choices=sorted(DESIGNS), default=None, help="Override the config design")

    simulate = command("simulate", cmd_simulate, "Write a simulated long-format dataset")
    dgp_flags(simulate)
    simulate.add_argument("--n", type=int, default=1000, help="Participants")

    replicate = command("replicate", cmd_replicate, "Run a Monte Carlo replication study")
    dgp_flags(replicate)
    replicate.add_argument("--n", type=int, default=1000, help="Participants per replication")
    replicate.add_argument("--reps", type=int, default=1000, help="Replications")
    replicate.add_argument("--truncate", type=_truncation, default=None, help="IPW weight percentile or 'none'")
    replicate.add_argument("--formulas", type=Path, default=None, help="FormulaConfig JSON file")
    replicate.add_argument("--mc-n", type=int, default=None, help="Oracle Monte Carlo size")

    analyze = command("analyze", cmd_analyze, "Estimate on an external person-time CSV")
    analyze.add_argument("--data", type=Path, required=True, help="Long-format CSV")
    analyze.add_argument("--design", choices=sorted(DESIGNS), default="visit")
    analyze.add_argument("--formulas", type=Path, default=None, help="FormulaConfig JSON file")
    analyze.add_argument("--estimand", choices=["psi_u", "psi_e", "psi_b", "all"], default="all")
    analyze.add_argument("--method", choices=["ipw", "gcomp", "all"], default="all")
    analyze.add_argument("--scale", choices=sorted(SCALES), default="rd")
    analyze.add_argument(
        "--truncate", type=_truncation, default=ANALYZE_TRUNCATION, help="IPW weight percentile or 'none'"
    )
    analyze.add_argument("--level", type=float, default=0.95, help="Confidence level")
    analyze.add_argument("--threshold", type=float, default=0.01, help="Extreme-propensity threshold")

    demo = command("demo-noncollapsibility", cmd_demo_noncollapsibility, "Per-trial marginal effect curves")
    demo.add_argument("--reps", type=int, default=100, help="Replications per family")
    demo.add_argument("--n", type=int, default=10_000, help="Participants per replication")

    limits = command("limits", cmd_limits, "Population limits of estimands and comparators")
    dgp_flags(limits)
    limits.add_argument("--mc-n", type=int, default=None, help="Oracle Monte Carlo size")
    limits.add_argument("--formulas", type=Path, default=None, help="FormulaConfig JSON file (comparator terms)")

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point for the trial-estimands command."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or EXIT_OK) if isinstance(e.code, int) else EXIT_USAGE

    setup_logging(args.log_level, args.log_format)
    with run_context(args.command):
        try:
            with timed_operation() as timing:
                code = int(args.handler(args))
        except EstimandsError as e:
            logger.debug(f"{args.command} failed", exc_info=True)
            logger.error(e.message, extra={"extra_fields": e.to_response()})
            return e.exit_code
        except (ValueError, OSError) as e:
            logger.error(str(e), extra={"extra_fields": create_error_response(e, context="runtime")})
            return EXIT_RUNTIME
        logger.info(f"{args.command} finished in {timing['duration_ms']} ms")
        return code


if __name__ == "__main__":
    sys.exit(main())
