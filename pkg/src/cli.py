"""
Línea de comandos: analyze, constants, simulate, verify, star-check.

Códigos de salida: 0 éxito; 1 escenario o modelo inválido; 2 hipótesis que
fallan, verificación FAIL, varianza crítica escalada no plana o tasa de
abortos mayor al 10 %.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import pandas as pd

from src.characteristics import assumption_sums, lln_constant
from src.constants import compute_constants, critical_variance_profile
from src.errors import BranchingError, ModelError, ScenarioError
from src.model import validate_assumptions
from src.report_generator import generate_pdf_report
from src.scenario import Scenario, load_scenario, write_json
from src.simulator import CSV_COLUMNS, run_batch, star_check
from src.spectral import spectral_decompose
from src.stats import (
    critical_flatness,
    critical_growth,
    direction_angles,
    lln_check,
    residual_histogram,
    verify_dichotomy,
    verify_frame,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_FAILED = 2
ABORT_WARN = 0.01
ABORT_FAIL = 0.10


def _apply_overrides(scenario: Scenario, args) -> Scenario:
    run = scenario.run
    for flag, key in (("n", "n"), ("delta", "delta"), ("replicates", "replicates"), ("seed", "seed"), ("workers", "workers")):
        value = getattr(args, flag, None)
        if value is not None:
            if value < 0 or (value == 0 and key not in ("seed", "delta")):
                raise ScenarioError(f"valor inválido: {value}", f"--{flag}")
            run = replace(run, **{key: value})
    return replace(scenario, run=run)


def _out_dir(scenario: Scenario, args) -> Path:
    out = Path(args.out or scenario.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prepare(scenario: Scenario):
    model = scenario.build_model()
    phi = scenario.build_characteristic(model)
    spectral = spectral_decompose(model.mean)
    return model, phi, spectral


# --- SUBCOMANDOS ---

def cmd_analyze(scenario: Scenario, args) -> int:
    model, phi, spectral = _prepare(scenario)
    assumptions = validate_assumptions(model, spectral)
    document = {
        "scenario": scenario.name,
        "spectral": spectral.to_dict(),
        "assumptions": assumptions.to_dict(),
        "characteristic": {
            "label": phi.label,
            "window": [phi.k_min, phi.k_max],
            "sums": assumption_sums(phi, spectral, model),
        },
    }
    path = _out_dir(scenario, args) / "analyze.json"
    write_json(path, document)
    logger.info("Reporte espectral en %s", path)
    return EXIT_OK if assumptions.all_hold else EXIT_FAILED


def cmd_constants(scenario: Scenario, args) -> int:
    model, phi, spectral = _prepare(scenario)
    constants = compute_constants(phi, spectral, model, scenario.run.eps_tail)
    document = {
        "scenario": scenario.name,
        "constants": constants.to_dict(),
        "rate": f"n^{constants.l_star + 0.5:g} rho^(n/2)" if constants.l_star is not None else "rho^(n/2)",
        "lln_constant": lln_constant(phi, spectral),
    }
    if spectral.critical:
        n = scenario.run.n
        document["critical_variance_profile"] = {"n": n, "value": critical_variance_profile(constants.x2, spectral, model, n)}
    path = _out_dir(scenario, args) / "constants.json"
    write_json(path, document)
    logger.info("Constantes en %s (%s)", path, constants.case_label())
    return EXIT_OK


def _simulate(scenario: Scenario, args):
    model, phi, spectral = _prepare(scenario)
    constants = compute_constants(phi, spectral, model, scenario.run.eps_tail)
    run = scenario.run
    batch = run_batch(
        model, phi, run.n, run.N, run.replicates, run.seed, run.workers,
        spectral=spectral, constants=constants, times=run.times or None,
    )
    out = _out_dir(scenario, args)
    batch.to_csv(out / "replicates.csv")
    summary = {"scenario": scenario.name, **batch.summary()}
    write_json(out / "summary.json", summary)
    return model, phi, spectral, constants, batch, summary


def _abort_status(rate: float) -> int:
    if rate > ABORT_FAIL:
        logger.error("Tasa de abortos %.2f%% mayor al %.0f%%", 100 * rate, 100 * ABORT_FAIL)
        return EXIT_FAILED
    if rate > ABORT_WARN:
        logger.warning("Tasa de abortos %.2f%%", 100 * rate)
    return EXIT_OK


def cmd_simulate(scenario: Scenario, args) -> int:
    batch = _simulate(scenario, args)[4]
    return _abort_status(batch.abort_rate)


def cmd_verify(scenario: Scenario, args) -> int:
    options = scenario.verification_options(args.case)
    out = _out_dir(scenario, args)
    extra = {}
    if args.from_csv:
        model, phi, spectral = _prepare(scenario)
        constants = compute_constants(phi, spectral, model, scenario.run.eps_tail)
        frame = pd.read_csv(args.from_csv)
        missing = sorted(set(CSV_COLUMNS) - set(frame.columns))
        if missing:
            raise ScenarioError(f"columnas ausentes: {missing}", str(args.from_csv))
        report = verify_frame(frame, constants, options, phi.is_real)
        abort_rate = float(frame["aborted"].mean()) if len(frame) else 0.0
        summary = {"replicates": len(frame), "abort_rate": abort_rate}
    else:
        model, phi, spectral, constants, batch, summary = _simulate(scenario, args)
        report = verify_dichotomy(batch, constants, options)
        abort_rate = batch.abort_rate
        if phi.is_deterministic and constants.case != "i-degenerate":
            extra["lln"] = lln_check(batch, phi, spectral, options.lln_band, options.w_min).to_dict()
        times = [t for t in batch.plan.times if t <= batch.plan.N]
        extra["direction_angles"] = direction_angles(batch, spectral, times)
        if constants.l_star is not None:
            growth = critical_growth(
                batch, constants, spectral, model, times,
                draws=options.bootstrap_draws, seed=options.bootstrap_seed,
            )
            flat = critical_flatness(growth, options.ci_level)
            extra["critical_growth"] = {"l_star": constants.l_star, "table": growth.to_dict(orient="records"), "flat": flat}
            if not flat:
                logger.error("La varianza crítica escalada no es plana en %s", times)

    write_json(out / "verification.json", {"scenario": scenario.name, "report": report.to_dict(), "summary": summary, **extra})
    if args.emit_hist and report.residuals is not None:
        residual_histogram(report.residuals).to_csv(out / "residual_hist.csv", index=False, float_format="%.17g")
    if args.pdf:
        generate_pdf_report(report, summary, scenario.name, out / "verification.pdf")

    logger.info("Verificación: %s", report.status)
    status = _abort_status(abort_rate)
    if report.status == "FAIL" or not extra.get("critical_growth", {}).get("flat", True):
        status = EXIT_FAILED
    return status


def cmd_star_check(scenario: Scenario, args) -> int:
    model, phi, spectral = _prepare(scenario)
    run = scenario.run
    report = star_check(model, phi, run.n, run.replicates, run.seed, spectral)
    write_json(_out_dir(scenario, args) / "star_check.json", {"scenario": scenario.name, **report.to_dict()})
    return EXIT_OK if report.passed else EXIT_FAILED


COMMANDS = {
    "analyze": cmd_analyze,
    "constants": cmd_constants,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "star-check": cmd_star_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmj", description="Procesos CMJ multitipo en tiempo discreto")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scenario", required=True, help="archivo TOML del escenario")
        p.add_argument("--out", default=None, help="directorio de salida")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--n", type=int, default=None)
        p.add_argument("--delta", type=int, default=None)
        p.add_argument("--replicates", type=int, default=None)
        p.add_argument("--verbose", "-v", action="store_true")
        if name == "verify":
            p.add_argument("--from-csv", default=None, help="replicates.csv ya simulado")
            p.add_argument("--emit-hist", action="store_true")
            p.add_argument("--pdf", action="store_true")
            p.add_argument("--case", choices=["i", "ii"], default=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        scenario = _apply_overrides(load_scenario(args.scenario), args)
        return COMMANDS[args.command](scenario, args)
    except (ScenarioError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BranchingError as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
