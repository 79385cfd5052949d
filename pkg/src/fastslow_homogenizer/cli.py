"""
Command-line front end.

Every command loads a model, runs one experiment and writes its artifacts
(CSV series and/or a JSON report) together with a run manifest next to the
primary output.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError

from . import __version__
from .analysis import (
    DtPolicy,
    bench,
    eps_sweep,
    pipeline_errors,
    run_check_suite,
    stepsize_scaling,
)
from .config import API_HOST, API_PORT, LOG_LEVEL, MAX_WORKERS, OUTPUT_DIR
from .errors import AnalysisError, IntegrationError, ModelError, SystemsError, ThermoError
from .integrator import Trajectory, aligned_step
from .model import ModelSpec, load_model
from .systems import initial_slow_state, run_full, run_homogenized, run_second_order, run_transformed
from .thermo import thermo_series, verify_constraint, verify_first_law

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

DETERMINISM_NOTE = "no random inputs; identical flags reproduce identical outputs"


class RunManifest(BaseModel):
    command: str
    model: str
    model_source: Optional[Dict] = None
    eps: List[float] = []
    dt: Dict[str, float] = {}
    T: float
    outputs: List[str]
    determinism: str = DETERMINISM_NOTE
    version: str = __version__


# Writers

def write_csv(traj: Trajectory, path: Path) -> Path:
    """Trajectory as CSV with a t column and 17 significant digits."""
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.column_stack([traj.times, traj.states])
    np.savetxt(path, table, delimiter=",", header=",".join(["t", *traj.labels]), comments="", fmt="%.17g")
    logger.info(f"Wrote {len(traj)} rows to {path}")
    return path


def write_rows(rows: Sequence[Dict[str, float]], path: Path) -> Path:
    """List of flat dicts as CSV; the header is the union of keys in first-seen order."""
    path.parent.mkdir(parents=True, exist_ok=True)
    header: List[str] = []
    for row in rows:
        header.extend(key for key in row if key not in header)
    table = np.array([[row.get(key, np.nan) for key in header] for row in rows], dtype=float)
    np.savetxt(path, table, delimiter=",", header=",".join(header), comments="", fmt="%.17g")
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path


def write_json(payload, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2)
    path.write_text(text + "\n")
    logger.info(f"Wrote report to {path}")
    return path


def write_manifest(manifest: RunManifest, primary: Path) -> Path:
    path = primary.with_name(primary.name + ".manifest.json")
    path.write_text(manifest.model_dump_json(indent=2) + "\n")
    return path


def _manifest(args, model: ModelSpec, outputs: List[Path], eps=(), dt=None, T=None) -> RunManifest:
    return RunManifest(
        command=args.command,
        model=args.model,
        model_source=model.sources,
        eps=[float(e) for e in eps],
        dt=dt or {},
        T=model.T if T is None else T,
        outputs=[str(path) for path in outputs],
    )


def _output(args, default: str) -> Path:
    return Path(args.out) if args.out else OUTPUT_DIR / default


def _floats(text: str) -> List[float]:
    try:
        return [float(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# Commands

def cmd_simulate(args) -> int:
    model = load_model(args.model)
    T = model.T if args.T is None else args.T
    dt = aligned_step(T, args.dt)
    if dt != args.dt:
        logger.info(f"dt adjusted from {args.dt} to {dt!r} to divide T={T}")
    if args.pipeline in ("full", "transformed") and args.dt > args.eps:
        logger.warning(f"dt={args.dt} > eps={args.eps}: step likely under-resolves fast phase")
    if args.pipeline == "full":
        traj = run_full(model, args.eps, dt, T, args.stride)
    elif args.pipeline == "transformed":
        traj = run_transformed(model, args.eps, dt, T, args.stride)
    elif args.pipeline == "homog":
        traj = run_homogenized(model, dt, T, args.stride)
    else:
        traj = run_second_order(model, args.eps, dt, T, args.stride)
    path = write_csv(traj, _output(args, f"simulate_{model.name}_{args.pipeline}.csv"))
    write_manifest(_manifest(args, model, [path], [args.eps], {args.pipeline: dt}, T), path)
    return EXIT_OK


def _policy(args) -> DtPolicy:
    return DtPolicy(full_coeff=args.full_coeff, slow_coeff=args.slow_coeff)


def cmd_sweep(args) -> int:
    model = load_model(args.model)
    report = eps_sweep(model, args.eps, args.T, _policy(args), workers=args.workers, component=args.component)
    path = write_json(report, _output(args, f"sweep_{model.name}.json"))
    rows = [
        dict(eps=eps, dt_full=df, dt_slow=ds, err_leading=el, err_second=es)
        for eps, df, ds, el, es in zip(
            report.eps_values, report.dt_full, report.dt_slow, report.sup_errors_leading, report.sup_errors_second
        )
    ]
    csv_path = write_rows(rows, path.with_suffix(".csv"))
    write_manifest(_manifest(args, model, [path, csv_path], report.eps_values, T=args.T), path)
    return EXIT_OK


def cmd_stepsize(args) -> int:
    model = load_model(args.model)
    options = dict(factor=args.factor)
    if args.reference_dt is not None:
        options["reference_dt"] = args.reference_dt
    result = stepsize_scaling(model, args.eps, args.pipeline, args.criterion, args.T, workers=args.workers, **options)
    path = write_json(result, _output(args, f"stepsize_{model.name}_{args.pipeline}_{args.criterion}.json"))
    dt = {f"dt_max@{report.eps:g}": report.dt_max for report in result.reports}
    write_manifest(_manifest(args, model, [path], args.eps, dt, args.T), path)
    return EXIT_OK


def cmd_bench(args) -> int:
    model = load_model(args.model)
    T = model.T if args.T is None else args.T
    policy = _policy(args)
    dt_full = args.dt_full or policy.dt_full(args.eps, T)
    dt_slow = args.dt_slow or policy.dt_slow(args.eps, T)
    report = bench(model, args.eps, T, dt_full, dt_slow, repeats=args.repeats, execute=not args.counts_only)
    path = write_json(report, _output(args, f"bench_{model.name}.json"))
    write_manifest(_manifest(args, model, [path], [args.eps], {"full": dt_full, "slow": dt_slow}, T), path)
    return EXIT_OK


def cmd_thermo(args) -> int:
    model = load_model(args.model)
    T = model.T if args.T is None else args.T
    policy = _policy(args)
    dt_full = policy.dt_full(args.eps, T)
    dt_slow = policy.dt_slow(args.eps, T)
    out_dt = max(dt_full, dt_slow) * args.stride
    slow = run_second_order(model, args.eps, dt_slow, T, int(round(out_dt / dt_slow)))
    full = None
    if not args.slow_only:
        full = run_full(model, args.eps, dt_full, T, int(round(out_dt / dt_full)))
    _, C = initial_slow_state(model)
    records = thermo_series(model, full, slow, args.eps, C)
    path = write_rows([record.to_row() for record in records], _output(args, f"thermo_{model.name}.csv"))
    summary = {
        "first_law": verify_first_law(records).model_dump(),
        "constraint": verify_constraint(records, dt_slow).model_dump(),
    }
    json_path = write_json(summary, path.with_suffix(".json"))
    write_manifest(_manifest(args, model, [path, json_path], [args.eps], {"full": dt_full, "slow": dt_slow}, T), path)
    return EXIT_OK


def cmd_check(args) -> int:
    model = load_model(args.model)
    T = model.T if args.T is None else args.T
    report = run_check_suite(model, T, args.eps)
    path = write_json(report, _output(args, f"check_{model.name}.json"))
    write_manifest(_manifest(args, model, [path], [args.eps], T=T), path)
    if not report.passed:
        logger.error(f"Failed checks: {', '.join(report.failed)}")
        return EXIT_CHECK_FAILED
    logger.info(f"All {len(report.results)} checks passed")
    return EXIT_OK


def cmd_compare(args) -> int:
    model = load_model(args.model)
    T = model.T if args.T is None else args.T
    errors = pipeline_errors(model, args.eps, T, _policy(args), component=args.component)
    path = write_csv(errors, _output(args, f"compare_{model.name}.csv"))
    write_manifest(_manifest(args, model, [path], [args.eps], T=T), path)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .api import app

    logger.info(f"Serving on http://{args.host}:{args.port} (docs at /docs)")
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastslow", description="Fast-slow Hamiltonian homogenization experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=LOG_LEVEL, help="logging level (default: %(default)s)")
    parser.add_argument("--workers", type=int, default=MAX_WORKERS, help="worker processes for sweeps and searches")
    commands = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler, help_text: str, eps_list: bool = False) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.set_defaults(handler=handler)
        sub.add_argument("--model", default="builtin:test", help="builtin:<name> or a JSON config path")
        sub.add_argument("--T", type=float, default=None, help="horizon (default: the model's T)")
        sub.add_argument("--out", default=None, help="output path")
        if eps_list:
            sub.add_argument("--eps", type=_floats, required=True, help="comma-separated eps values")
        else:
            sub.add_argument("--eps", type=float, default=0.125)
        return sub

    def add_policy(sub: argparse.ArgumentParser) -> None:
        defaults = DtPolicy()
        sub.add_argument("--full-coeff", type=float, default=defaults.full_coeff, help="full dt = coeff * eps^3")
        sub.add_argument("--slow-coeff", type=float, default=defaults.slow_coeff, help="slow dt = coeff * eps^1.5")

    sub = add("simulate", cmd_simulate, "integrate one pipeline and write its trajectory")
    sub.add_argument("--pipeline", choices=["full", "transformed", "homog", "second"], default="full")
    sub.add_argument("--dt", type=float, required=True)
    sub.add_argument("--stride", type=int, default=1, help="write every stride-th step")

    sub = add("sweep", cmd_sweep, "sup errors over eps and their fitted slopes", eps_list=True)
    sub.add_argument("--component", type=int, default=1)
    add_policy(sub)

    sub = add("stepsize", cmd_stepsize, "largest step on the error plateau", eps_list=True)
    sub.add_argument("--pipeline", choices=["full", "slow"], default="full")
    sub.add_argument("--criterion", choices=["leading", "second"], default="second")
    sub.add_argument("--factor", type=float, default=1.5, help="plateau threshold factor")
    sub.add_argument("--reference-dt", type=float, default=None)

    sub = add("bench", cmd_bench, "step counts and wall times of the pipelines")
    sub.add_argument("--dt-full", type=float, default=None)
    sub.add_argument("--dt-slow", type=float, default=None)
    sub.add_argument("--repeats", type=int, default=1)
    sub.add_argument("--counts-only", action="store_true", help="report step counts without running")
    add_policy(sub)

    sub = add("thermo", cmd_thermo, "thermodynamic observables along the trajectories")
    sub.add_argument("--stride", type=int, default=1, help="output spacing in units of the coarser step")
    sub.add_argument("--slow-only", action="store_true", help="skip the finite-eps observables")
    add_policy(sub)

    add("check", cmd_check, "run the invariant check suite")

    sub = add("compare", cmd_compare, "error series of the leading and second-order approximations")
    sub.add_argument("--component", type=int, default=1)
    add_policy(sub)

    sub = commands.add_parser("serve", help="run the HTTP service")
    sub.set_defaults(handler=cmd_serve)
    sub.add_argument("--host", default=API_HOST)
    sub.add_argument("--port", type=int, default=API_PORT)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except (ModelError, ValueError, OSError, ValidationError) as exc:
        logger.error(f"{args.command}: configuration error: {exc}")
        return EXIT_CONFIG
    except (IntegrationError, SystemsError, ThermoError, AnalysisError) as exc:
        logger.error(f"{args.command}: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
