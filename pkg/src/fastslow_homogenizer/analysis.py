"""
Experiment harness: error norms, eps sweeps, maximal step-size search,
cost benchmarks and the invariant check suite.

All step sizes are dyadic fractions T / base^k of the horizon, so the grids
of any two runs nest and errors are compared on the coarser grid without
interpolation.
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, computed_field

from .config import GRID_BASE, GRID_DECADES, MAX_WORKERS, NOISE_FLOOR, PLATEAU_FACTOR
from .errors import GridMismatch, IntegrationError, NoPlateau
from .integrator import Trajectory, aligned_step, dyadic_step
from .model import ModelSpec
from .systems import (
    SlowSystem,
    check_resonance,
    from_action_angle,
    full_energy,
    full_states,
    homogenized_energy,
    initial_slow_state,
    run_full,
    run_homogenized,
    run_second_order,
    second_order_energy_gradients,
    slow_states,
    to_action_angle,
)
from .thermo import observables_leading, observables_second, verify_constituents, verify_constraint, verify_first_law

logger = logging.getLogger(__name__)


# Grids and norms

def common_grid(a: Trajectory, b: Trajectory) -> Tuple[Trajectory, Trajectory]:
    """Subsample the finer of two nested trajectories onto the coarser grid."""
    if len(a) == len(b) and np.array_equal(a.times, b.times):
        return a, b
    swap = a.spacing < b.spacing
    fine, coarse = (a, b) if swap else (b, a)
    if coarse.spacing == 0.0 or fine.spacing == 0.0:
        raise GridMismatch("cannot align a single-sample trajectory with a longer one")
    ratio = coarse.spacing / fine.spacing
    stride = int(round(ratio))
    if stride < 1 or not math.isclose(stride, ratio, rel_tol=1e-9):
        raise GridMismatch(f"grid spacings {a.spacing!r} and {b.spacing!r} do not nest")
    fine = fine.subsample(stride)
    if len(fine) != len(coarse) or not np.allclose(fine.times, coarse.times, rtol=0.0, atol=1e-9 * coarse.spacing):
        raise GridMismatch("trajectories do not cover the same time span")
    fine = Trajectory(coarse.times, fine.states, fine.labels)
    return (fine, coarse) if swap else (coarse, fine)


def sup_error(a: Trajectory, b: Trajectory, column: str, other: Optional[str] = None) -> float:
    """max over the shared grid of |a[column] - b[other or column]|."""
    if len(a) != len(b) or not np.array_equal(a.times, b.times):
        raise GridMismatch("sup_error needs trajectories on identical grids")
    return float(np.max(np.abs(a.column(column) - b.column(other or column))))


class SlopeFit(NamedTuple):
    slope: float
    intercept: float
    residual: float


def fit_loglog_slope(x: Sequence[float], y: Sequence[float]) -> SlopeFit:
    """Least-squares line through (log x, log y); residual is the rms deviation in log y."""
    log_x = np.log(np.asarray(x, dtype=float))
    log_y = np.log(np.asarray(y, dtype=float))
    slope, intercept = np.polyfit(log_x, log_y, 1)
    deviation = log_y - (slope * log_x + intercept)
    return SlopeFit(float(slope), float(intercept), float(np.sqrt(np.mean(deviation ** 2))))


def windowed_average(traj: Trajectory, column: str, window: float) -> Trajectory:
    """Moving trapezoidal average over windows of the given length, stamped at window centres."""
    if traj.spacing == 0.0:
        raise ValueError("windowed_average needs at least two samples")
    span = traj.times[-1] - traj.times[0]
    if window > span * (1.0 + 1e-12):
        raise ValueError(f"window {window} exceeds the trajectory span {span}")
    dx = traj.spacing
    m = max(1, int(round(window / dx)))
    values = traj.column(column)
    cumulative = np.concatenate([[0.0], np.cumsum(0.5 * (values[1:] + values[:-1]) * dx)])
    averages = (cumulative[m:] - cumulative[:-m]) / (m * dx)
    centres = traj.times[:-m] + 0.5 * m * dx
    return Trajectory(centres, averages.reshape(-1, 1), (f"{column}_avg",))


# Parallel execution

def run_jobs(func: Callable, items: Sequence, workers: Optional[int] = None) -> List:
    """Map func over items in a bounded process pool; results keep the order of items."""
    workers = MAX_WORKERS if workers is None else max(1, workers)
    if workers == 1 or len(items) <= 1:
        return [func(item) for item in items]
    logger.info(f"Running {len(items)} jobs on {min(workers, len(items))} workers")
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(func, items))


# Step-size policy

class DtPolicy(BaseModel):
    """dt = coeff * eps^power per pipeline, rounded down to a dyadic fraction of T."""

    full_coeff: float = 0.25
    full_power: float = 3.0
    slow_coeff: float = 0.05
    slow_power: float = 1.5
    base: int = GRID_BASE

    def dt_full(self, eps: float, T: float) -> float:
        return dyadic_step(T, self.full_coeff * eps ** self.full_power, self.base)

    def dt_slow(self, eps: float, T: float) -> float:
        return dyadic_step(T, self.slow_coeff * eps ** self.slow_power, self.base)


# coeff, power of the expected maximal step per (pipeline, criterion)
SEARCH_GUESS = {
    ("full", "leading"): (0.0625, 2.0),
    ("full", "second"): (0.25, 3.0),
    ("slow", "leading"): (0.25, 1.0),
    ("slow", "second"): (0.05, 1.5),
}

# coeff, power of the reference run of the other pipeline
REFERENCE_DT = {"full": (0.05, 3.0), "slow": (0.01, 1.5)}


def _stride(out_dt: float, dt: float) -> int:
    return max(1, int(round(out_dt / dt)))


def _run(model: ModelSpec, kind: str, eps: float, dt: float, T: float, out_dt: float) -> Trajectory:
    stride = _stride(out_dt, dt)
    if kind == "full":
        return run_full(model, eps, dt, T, stride)
    if kind == "homog":
        return run_homogenized(model, dt, T, stride)
    return run_second_order(model, eps, dt, T, stride)


# Pipeline comparison

def pipeline_errors(
    model: ModelSpec,
    eps: float,
    T: Optional[float] = None,
    policy: Optional[DtPolicy] = None,
    dt_full: Optional[float] = None,
    dt_slow: Optional[float] = None,
    component: int = 1,
) -> Trajectory:
    """
    Leading and second-order errors of one slow component on the shared grid.

    Columns: e_leading = y_eps - y0, e_second = y_eps - y_recon,
    scaled = (y_eps - y0) / eps^2, y2_total = ybar2 + [y2], ybar2,
    and running maxima max_leading, max_second of the absolute errors.
    """
    T = model.T if T is None else T
    policy = policy or DtPolicy()
    dt_full = dt_full or policy.dt_full(eps, T)
    dt_slow = dt_slow or policy.dt_slow(eps, T)
    out_dt = max(dt_full, dt_slow)
    full, second = common_grid(_run(model, "full", eps, dt_full, T, out_dt), _run(model, "second", eps, dt_slow, T, out_dt))
    y = f"y{component}"
    y_eps = full.column(y)
    y0 = second.column(y)
    y_recon = second.column(f"y_recon{component}")
    e_leading = y_eps - y0
    e_second = y_eps - y_recon
    columns = np.column_stack([
        e_leading,
        e_second,
        e_leading / eps ** 2,
        (y_recon - y0) / eps ** 2,
        second.column(f"ybar2_{component}"),
        np.maximum.accumulate(np.abs(e_leading)),
        np.maximum.accumulate(np.abs(e_second)),
    ])
    labels = ("e_leading", "e_second", "scaled", "y2_total", "ybar2", "max_leading", "max_second")
    return Trajectory(full.times, columns, labels)


# Eps sweep

class SweepReport(BaseModel):
    eps_values: List[float]
    dt_full: List[float]
    dt_slow: List[float]
    sup_errors_leading: List[float]
    sup_errors_second: List[float]
    correction_scale: List[float]
    slope_leading: Optional[float] = None
    residual_leading: Optional[float] = None
    slope_second: Optional[float] = None
    residual_second: Optional[float] = None
    degenerate: bool = False


def _sweep_job(job: Tuple[ModelSpec, float, float, DtPolicy, int]) -> Dict[str, float]:
    model, eps, T, policy, component = job
    errors = pipeline_errors(model, eps, T, policy, component=component)
    return {
        "eps": eps,
        "dt_full": policy.dt_full(eps, T),
        "dt_slow": policy.dt_slow(eps, T),
        "leading": float(np.max(np.abs(errors.column("e_leading")))),
        "second": float(np.max(np.abs(errors.column("e_second")))),
        "correction": float(np.max(np.abs(errors.column("y2_total")))) * eps ** 2,
    }


def eps_sweep(
    model: ModelSpec,
    eps_list: Sequence[float],
    T: Optional[float] = None,
    policy: Optional[DtPolicy] = None,
    workers: Optional[int] = 1,
    component: int = 1,
) -> SweepReport:
    """
    Sup errors of the leading and second-order approximations over several eps,
    with fitted log-log slopes.

    A sweep whose predicted corrections and leading errors all sit below the
    noise floor is flagged degenerate and gets no slopes.
    """
    if len(eps_list) < 3:
        raise ValueError("an eps sweep needs at least three values to fit slopes")
    T = model.T if T is None else T
    policy = policy or DtPolicy()
    eps_values = sorted((float(e) for e in eps_list), reverse=True)
    logger.info(f"Sweeping eps over {eps_values} with T={T:g}")
    results = run_jobs(_sweep_job, [(model, eps, T, policy, component) for eps in eps_values], workers)

    leading = [res["leading"] for res in results]
    second = [res["second"] for res in results]
    correction = [res["correction"] for res in results]
    report = dict(
        eps_values=eps_values,
        dt_full=[res["dt_full"] for res in results],
        dt_slow=[res["dt_slow"] for res in results],
        sup_errors_leading=leading,
        sup_errors_second=second,
        correction_scale=correction,
    )
    if max(correction) < NOISE_FLOOR or max(leading) < NOISE_FLOOR:
        logger.warning("Sweep is degenerate: corrections below noise floor")
        return SweepReport(degenerate=True, **report)
    fit_leading = fit_loglog_slope(eps_values, leading)
    fit_second = fit_loglog_slope(eps_values, second)
    logger.info(f"Fitted slopes: leading {fit_leading.slope:.3f}, second {fit_second.slope:.3f}")
    return SweepReport(
        slope_leading=fit_leading.slope,
        residual_leading=fit_leading.residual,
        slope_second=fit_second.slope,
        residual_second=fit_second.residual,
        **report,
    )


# Maximal step-size search

class StepSizeReport(BaseModel):
    eps: float
    pipeline: str
    criterion: str
    T: float
    dts: List[float]
    errors: List[float]
    plateau: float
    dt_max: float
    factor: float
    reference_dt: float


def locate_max_step(dts: Sequence[float], errors: Sequence[float], factor: float = PLATEAU_FACTOR) -> Tuple[float, float]:
    """
    Plateau error and the largest dt up to which every error stays within factor * plateau.

    The plateau is the median error of the three smallest steps; those three
    must agree within the factor.

    Raises:
        NoPlateau: the smallest-step errors have not settled
    """
    if len(dts) < 3:
        raise NoPlateau("need at least three step sizes to find a plateau")
    order = np.argsort(dts)
    dts = np.asarray(dts, dtype=float)[order]
    errors = np.asarray(errors, dtype=float)[order]
    smallest = errors[:3]
    if not np.all(np.isfinite(smallest)) or smallest.max() > factor * smallest.min():
        raise NoPlateau(f"errors at the three smallest steps do not agree: {smallest.tolist()}")
    plateau = float(np.median(smallest))
    dt_max = dts[0]
    for dt, error in zip(dts, errors):
        if not error <= factor * plateau:
            break
        dt_max = dt
    return float(dt_max), plateau


def search_grid(eps: float, pipeline: str, criterion: str, T: float, base: int = GRID_BASE, decades: float = GRID_DECADES) -> List[float]:
    """Dyadic steps from guess / base^3 upwards spanning at least the given decades (capped at T)."""
    coeff, power = SEARCH_GUESS[(pipeline, criterion)]
    guess = dyadic_step(T, coeff * eps ** power, base)
    count = int(math.ceil(decades * math.log(10) / math.log(base))) + 1
    smallest = guess / base ** 3
    return [dt for dt in (smallest * base ** k for k in range(count)) if dt <= T * (1.0 + 1e-12)]


def _search_job(job) -> float:
    model, pipeline, criterion, eps, dt, T, out_dt, reference, column = job
    kind = "full" if pipeline == "full" else ("second" if criterion == "second" else "homog")
    try:
        candidate = _run(model, kind, eps, dt, T, out_dt)
    except IntegrationError as exc:
        logger.warning(f"Integration at dt={dt:.3e} aborted: {exc}")
        return math.inf
    a, b = common_grid(candidate, reference)
    if pipeline == "full":
        return sup_error(a, b, column[0], column[1])
    return sup_error(b, a, column[0], column[1])


def stepsize_search(
    model: ModelSpec,
    eps: float,
    pipeline: str = "full",
    T: Optional[float] = None,
    criterion: str = "second",
    dts: Optional[Sequence[float]] = None,
    reference_dt: Optional[float] = None,
    factor: float = PLATEAU_FACTOR,
    base: int = GRID_BASE,
    decades: float = GRID_DECADES,
    workers: Optional[int] = 1,
    component: int = 1,
) -> StepSizeReport:
    """
    Largest step of one pipeline that keeps its error against a fine run of
    the other pipeline on the plateau.

    pipeline is "full" or "slow"; criterion "leading" compares y_eps with y0,
    "second" compares y_eps with the second-order reconstruction.
    """
    if pipeline not in ("full", "slow"):
        raise ValueError(f"pipeline must be 'full' or 'slow', got {pipeline!r}")
    if criterion not in ("leading", "second"):
        raise ValueError(f"criterion must be 'leading' or 'second', got {criterion!r}")
    T = model.T if T is None else T
    dts = sorted(dts) if dts is not None else search_grid(eps, pipeline, criterion, T, base, decades)
    other = "slow" if pipeline == "full" else "full"
    if reference_dt is None:
        coeff, power = REFERENCE_DT[other]
        reference_dt = dyadic_step(T, coeff * eps ** power, base)
    reference_kind = "full" if other == "full" else ("second" if criterion == "second" else "homog")
    out_ref = max(reference_dt, min(dts))
    logger.info(f"Step-size search: pipeline={pipeline}, criterion={criterion}, eps={eps:g}, reference dt={reference_dt:.3e}")
    reference = _run(model, reference_kind, eps, reference_dt, T, out_ref)

    y = f"y{component}"
    slow_column = f"y_recon{component}" if criterion == "second" else y
    column = (y, slow_column)
    jobs = [(model, pipeline, criterion, eps, dt, T, max(dt, out_ref), reference, column) for dt in dts]
    errors = run_jobs(_search_job, jobs, workers)
    dt_max, plateau = locate_max_step(dts, errors, factor)
    logger.info(f"dt_max = {dt_max:.3e} (plateau {plateau:.3e})")
    return StepSizeReport(
        eps=eps,
        pipeline=pipeline,
        criterion=criterion,
        T=T,
        dts=list(dts),
        errors=[float(e) for e in errors],
        plateau=plateau,
        dt_max=dt_max,
        factor=factor,
        reference_dt=reference_dt,
    )


class StepSizeScaling(BaseModel):
    pipeline: str
    criterion: str
    reports: List[StepSizeReport]
    exponent: Optional[float] = None
    residual: Optional[float] = None


def stepsize_scaling(
    model: ModelSpec,
    eps_list: Sequence[float],
    pipeline: str = "full",
    criterion: str = "second",
    T: Optional[float] = None,
    workers: Optional[int] = 1,
    **options,
) -> StepSizeScaling:
    """Step-size searches over several eps and the fitted exponent of dt_max against eps."""
    eps_values = sorted((float(e) for e in eps_list), reverse=True)
    reports = [stepsize_search(model, eps, pipeline, T, criterion, workers=workers, **options) for eps in eps_values]
    if len(reports) < 2:
        return StepSizeScaling(pipeline=pipeline, criterion=criterion, reports=reports)
    fit = fit_loglog_slope(eps_values, [report.dt_max for report in reports])
    logger.info(f"dt_max scales like eps^{fit.slope:.3f} ({pipeline}, {criterion})")
    return StepSizeScaling(pipeline=pipeline, criterion=criterion, reports=reports, exponent=fit.slope, residual=fit.residual)


# Benchmarks

class BenchReport(BaseModel):
    eps: float
    T: float
    dt_full: float
    dt_slow: float
    steps_full: int
    steps_slow: int
    step_ratio: float
    dt_ratio: float
    repeats: int
    wall_full: Optional[float] = None
    wall_homog: Optional[float] = None
    wall_second: Optional[float] = None
    wall_slow_sequential: Optional[float] = None
    wall_slow_parallel: Optional[float] = None
    wall_ratio: Optional[float] = None


def _median_wall(func: Callable[[], object], repeats: int) -> float:
    walls = []
    for _ in range(repeats):
        start = time.perf_counter()
        func()
        walls.append(time.perf_counter() - start)
    return float(np.median(walls))


def bench(
    model: ModelSpec,
    eps: float,
    T: Optional[float],
    dt_full: float,
    dt_slow: float,
    repeats: int = 1,
    execute: bool = True,
) -> BenchReport:
    """
    Step counts and median wall times of the full run against the
    homogenized and second-order runs (sequential sum and parallel max).
    """
    T = model.T if T is None else T
    steps_full = int(math.ceil(T / dt_full - 1e-9))
    steps_slow = int(math.ceil(T / dt_slow - 1e-9))
    report = dict(
        eps=eps,
        T=T,
        dt_full=dt_full,
        dt_slow=dt_slow,
        steps_full=steps_full,
        steps_slow=steps_slow,
        step_ratio=steps_full / steps_slow,
        dt_ratio=dt_slow / dt_full,
        repeats=repeats,
    )
    if not execute:
        return BenchReport(**report)
    full_dt = aligned_step(T, dt_full)
    slow_dt = aligned_step(T, dt_slow)
    logger.info(f"Benchmarking eps={eps:g}: {steps_full} full steps against {steps_slow} slow steps")
    wall_full = _median_wall(lambda: run_full(model, eps, full_dt, T, steps_full), repeats)
    wall_homog = _median_wall(lambda: run_homogenized(model, slow_dt, T, steps_slow), repeats)
    wall_second = _median_wall(lambda: run_second_order(model, eps, slow_dt, T, steps_slow), repeats)
    return BenchReport(
        wall_full=wall_full,
        wall_homog=wall_homog,
        wall_second=wall_second,
        wall_slow_sequential=wall_homog + wall_second,
        wall_slow_parallel=max(wall_homog, wall_second),
        wall_ratio=wall_full / max(wall_homog, wall_second),
        **report,
    )


# Invariant check suite

class CheckResult(BaseModel):
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""


class CheckReport(BaseModel):
    model: str
    T: float
    eps: float
    results: List[CheckResult]

    @computed_field
    @property
    def passed(self) -> bool:
        return all(result.passed for result in self.results)

    @computed_field
    @property
    def failed(self) -> List[str]:
        return [result.name for result in self.results if not result.passed]


def _energy_drift(model: ModelSpec, eps: float, dt: float, T: float) -> float:
    traj = run_full(model, eps, dt, T)
    energies = np.array([full_energy(model, state, eps) for state in full_states(model, traj)])
    return float(np.max(np.abs(energies - energies[0])) / abs(energies[0]))


def run_check_suite(model: ModelSpec, T: float = 1.0, eps: float = 0.125, fine_steps: int = 8192) -> CheckReport:
    """Named pass/fail results for the resonance diagnostics and the conservation and thermodynamic relations."""
    results: List[CheckResult] = []
    logger.info(f"Running check suite on {model.name!r} with T={T:g}, eps={eps:g}")
    dt = T / fine_steps

    homog = run_homogenized(model, dt, T, output_stride=64)
    for order in (2, 3):
        res = check_resonance(model, homog, order)
        results.append(CheckResult(name=f"resonance_order_{order}", passed=res.passed, value=res.min_value, threshold=res.tol))

    dt_energy = dyadic_step(T, 0.05 * eps ** 3)
    drift = _energy_drift(model, eps, dt_energy, T)
    drift_half = _energy_drift(model, eps, dt_energy / 2, T)
    results.append(CheckResult(name="energy_drift", passed=drift <= 2e-5, value=drift, threshold=2e-5, detail=f"dt={dt_energy:.3e}"))
    ratio = drift / drift_half if drift_half > 0 else math.inf
    results.append(CheckResult(name="energy_drift_order", passed=ratio >= 3.5, value=ratio, threshold=3.5))

    full = run_full(model, eps, dt_energy, T, output_stride=max(1, int(round(T / dt_energy)) // 64))
    round_trip = 0.0
    for state in full_states(model, full)[1:]:
        back = from_action_angle(model, to_action_angle(model, state, eps), eps)
        for a, b in ((state.y, back.y), (state.ydot, back.ydot), (state.z, back.z), (state.zdot, back.zdot)):
            round_trip = max(round_trip, float(np.max(np.abs(a - b) / (1.0 + np.abs(a)))))
    results.append(CheckResult(name="transform_round_trip", passed=round_trip <= 1e-12, value=round_trip, threshold=1e-12))

    second = run_second_order(model, eps, dt, T, output_stride=64)
    start, C = initial_slow_state(model)
    system = SlowSystem(model, C)
    records = [observables_second(model, s, system=system) for s in slow_states(model, second)]
    constraint = verify_constraint(records, dt)
    results.append(CheckResult(name="constraint", passed=constraint.passed, value=constraint.max_abs, threshold=constraint.tolerance))

    constituents = verify_constituents(model, start, h=1e-3, C=C)
    worst = max(constituents.temperature_residual, constituents.force_residual, constituents.identity_residual)
    results.append(CheckResult(name="constituent_relations", passed=worst <= 1e-10, value=worst, threshold=1e-10))

    coarse = run_homogenized(model, dt, T, output_stride=fine_steps // 64)
    fine = run_homogenized(model, dt, T, output_stride=fine_steps // 128)
    rates = []
    for traj in (coarse, fine):
        y, p = traj.columns([f"y{k + 1}" for k in range(model.n)]), traj.columns([f"p{k + 1}" for k in range(model.n)])
        recs = [observables_leading(model, y[k], p[k], t=float(t)) for k, t in enumerate(traj.times)]
        rates.append(verify_first_law(recs).max_rate)
    ratio = rates[0] / rates[1] if rates[1] > 0 else math.inf
    order_ok = 3.5 <= ratio <= 4.5 or max(rates) < NOISE_FLOOR
    results.append(CheckResult(name="first_law_order", passed=order_ok, value=ratio, threshold=3.5))

    y, p = homog.columns([f"y{k + 1}" for k in range(model.n)]), homog.columns([f"p{k + 1}" for k in range(model.n)])
    energies = np.array([homogenized_energy(model, y[k], p[k]) for k in range(len(homog))])
    homog_drift = float(np.max(np.abs(energies - energies[0])) / max(abs(energies[0]), 1.0))
    results.append(CheckResult(name="homogenized_energy", passed=homog_drift <= 1e-6, value=homog_drift, threshold=1e-6))

    worst = 0.0
    for s in (start, slow_states(model, second)[-1]):
        d_p0, d_y0 = second_order_energy_gradients(model, s, C)
        q, pm = s.split()
        rates_q = system.partitioned().rhs_q(0.0, q, pm)
        rates_p = system.partitioned().rhs_p(0.0, q, pm)
        n, r = model.n, model.r
        worst = max(worst, float(np.max(np.abs(d_p0 - rates_q[n + r:2 * n + r]))), float(np.max(np.abs(d_y0 - rates_p[n:]))))
    results.append(CheckResult(name="hamiltonian_form", passed=worst <= 1e-6, value=worst, threshold=1e-6))

    report = CheckReport(model=model.name, T=T, eps=eps, results=results)
    if not report.passed:
        logger.warning(f"Failed checks: {report.failed}")
    return report
