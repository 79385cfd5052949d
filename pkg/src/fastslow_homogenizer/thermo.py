"""
Thermodynamic observables of the fast subsystem.

The fast oscillators are treated as a thermodynamic system with energy
E_perp = sum theta omega, controlled by the slow positions. Temperature,
entropy and external force are evaluated at finite eps, at leading order
along the homogenized motion and for the averaged second-order corrections.
"""

import logging
import math
from dataclasses import dataclass, fields, replace
from typing import List, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel

from .errors import GridMismatch, ZeroFastEnergy
from .integrator import Trajectory
from .model import ModelSpec, frequency_jets, theta_star, v_jet
from .systems import (
    FullState,
    SlowState,
    SlowSystem,
    TransformedState,
    from_action_angle,
    full_energy,
    full_states,
    slow_states,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ThermoRecord:
    """Observables at one time; fields not computed by a producer stay None."""

    t: Optional[float] = None
    # finite eps
    E_perp: Optional[float] = None
    E_par: Optional[float] = None
    T_eps: Optional[float] = None
    S_eps: Optional[float] = None
    F_eps: Optional[np.ndarray] = None
    Gamma_eps: Optional[float] = None
    log_Gamma_eps: Optional[float] = None
    # leading order
    y0: Optional[np.ndarray] = None
    E0_perp: Optional[float] = None
    E0_perp_from_entropy: Optional[float] = None
    E0_par: Optional[float] = None
    T0: Optional[float] = None
    S0: Optional[float] = None
    F0: Optional[np.ndarray] = None
    # averaged second order
    Ebar2_perp: Optional[float] = None
    Ebar2_perp_from_entropy: Optional[float] = None
    Ebar2_par: Optional[float] = None
    Sbar2: Optional[float] = None
    # oscillatory expansion terms
    E1_perp_osc: Optional[float] = None
    S1_osc: Optional[float] = None
    E2_perp_osc: Optional[float] = None
    S2_osc: Optional[float] = None
    E1_par_osc: Optional[float] = None
    E2_par_osc: Optional[float] = None

    def merge(self, other: "ThermoRecord") -> "ThermoRecord":
        """Copy with every field set in other taking precedence."""
        updates = {f.name: getattr(other, f.name) for f in fields(other) if getattr(other, f.name) is not None}
        return replace(self, **updates)

    def to_row(self) -> dict:
        row = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, np.ndarray):
                for k, item in enumerate(value):
                    row[f"{f.name}_{k + 1}"] = float(item)
            else:
                row[f.name] = float(value)
        return row


def entropy_constant(r: int, eps: float) -> float:
    """C_eps = -log((2 eps)^r Gamma_2r); log Gamma_eps + C_eps equals S_eps."""
    return -(r * math.log(2.0 * eps) + _log_unit_ball(r))


def _log_unit_ball(r: int) -> float:
    # volume of the unit ball in 2r dimensions is pi^r / r!
    return r * math.log(math.pi) - math.lgamma(r + 1)


def log_phase_volume(model: ModelSpec, state: Union[FullState, TransformedState], eps: float) -> float:
    """log of the phase-space volume enclosed by the fast energy surface at fixed y."""
    full = _as_full(model, state, eps)
    e_perp = _fast_energy(model, full, eps)
    omega = frequency_jets(model, full.y, order=1).omega
    r = model.r
    return r * math.log(eps) + _log_unit_ball(r) + r * math.log(2.0 * e_perp) - float(np.sum(np.log(omega)))


def _as_full(model: ModelSpec, state, eps: float) -> FullState:
    if isinstance(state, TransformedState):
        return from_action_angle(model, state, eps)
    return state


def _fast_energy(model: ModelSpec, state: FullState, eps: float) -> float:
    omega = frequency_jets(model, state.y, order=1).omega
    e_perp = 0.5 * state.zdot @ state.zdot + 0.5 * np.sum(omega ** 2 * state.z ** 2) / eps ** 2
    if e_perp <= 0.0:
        raise ZeroFastEnergy("fast subsystem carries no energy; entropy is undefined")
    return float(e_perp)


def observables_eps(model: ModelSpec, state: Union[FullState, TransformedState], eps: float, t: Optional[float] = None) -> ThermoRecord:
    """
    Temperature, entropy and force of the fast subsystem at finite eps.

    Raises:
        ZeroFastEnergy: z = zdot = 0 in every channel
    """
    full = _as_full(model, state, eps)
    e_perp = _fast_energy(model, full, eps)
    f = frequency_jets(model, full.y, order=1)
    r = model.r
    temperature = e_perp / r
    log_gamma = log_phase_volume(model, full, eps)
    return ThermoRecord(
        t=t,
        E_perp=e_perp,
        E_par=full_energy(model, full, eps) - e_perp,
        T_eps=temperature,
        S_eps=float(np.sum(np.log(e_perp / f.omega))),
        F_eps=temperature * np.sum(f.d_log, axis=0),
        Gamma_eps=math.exp(log_gamma),
        log_Gamma_eps=log_gamma,
    )


def observables_leading(model: ModelSpec, y0, p0, t: Optional[float] = None) -> ThermoRecord:
    y0 = np.asarray(y0, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    ts = theta_star(model)
    f = frequency_jets(model, y0, order=1)
    e0 = float(ts @ f.omega)
    if e0 <= 0.0:
        raise ZeroFastEnergy("every theta* vanishes; leading-order entropy is undefined")
    r = model.r
    t0 = e0 / r
    s0 = float(np.sum(np.log(e0 / f.omega)))
    return ThermoRecord(
        t=t,
        y0=y0.copy(),
        E0_perp=e0,
        E0_perp_from_entropy=math.exp(s0 / r) * float(np.prod(f.omega ** (1.0 / r))),
        E0_par=float(0.5 * p0 @ p0 + v_jet(model, y0, order=1).value),
        T0=t0,
        S0=s0,
        F0=t0 * np.sum(f.d_log, axis=0),
    )


def second_order_energy_perp_from_entropy(T0: float, F0, Sbar2: float, ybar2, offset: float) -> float:
    """Ebar2_perp as a function of (Sbar2, ybar2) at frozen (y0, p0)."""
    return float(np.asarray(F0) @ np.asarray(ybar2) + T0 * Sbar2 + offset)


def _entropy_offset(system: SlowSystem, s: SlowState, t0: float) -> float:
    j = system.jets(s.y0)
    weighted = system.theta_star * (j.d_log @ s.p0)
    return float(weighted @ weighted) / (16.0 * system.model.r * t0)


def observables_second(model: ModelSpec, s: SlowState, C: Optional[np.ndarray] = None, system: Optional[SlowSystem] = None) -> ThermoRecord:
    system = system or SlowSystem(model, C)
    leading = observables_leading(model, s.y0, s.p0)
    par, perp = system.energy_parts(s)
    j = system.jets(s.y0)
    offset = _entropy_offset(system, s, leading.T0)
    s_bar2 = perp / leading.T0 - float(np.sum(j.d_log @ s.ybar2)) - offset / leading.T0
    return ThermoRecord(
        Ebar2_perp=perp,
        Ebar2_perp_from_entropy=second_order_energy_perp_from_entropy(leading.T0, leading.F0, s_bar2, s.ybar2, offset),
        Ebar2_par=par,
        Sbar2=s_bar2,
    )


def oscillatory_observables(model: ModelSpec, s: SlowState, eps: float, C: Optional[np.ndarray] = None, system: Optional[SlowSystem] = None) -> ThermoRecord:
    """First- and second-order expansion terms of E_perp, S and E_par, oscillations included."""
    system = system or SlowSystem(model, C)
    terms = system.correction_terms(s, eps)
    j = system.jets(s.y0)
    ts = system.theta_star
    r = model.r
    t0 = float(ts @ j.omega) / r
    dt_log = j.d_log @ s.p0
    sin2 = np.sin(2.0 * s.phi0 / eps)
    cos2 = np.cos(2.0 * s.phi0 / eps)
    y2_total = s.ybar2 + terms.y2_osc

    e1_perp = float(terms.theta1_osc @ j.omega)
    e2_perp = float((terms.thetabar2 + terms.theta2_osc) @ j.omega + ts @ (j.d_omega @ y2_total))
    weighted_sin = ts * sin2
    e2_par = float(
        s.p0 @ (s.pbar2 + terms.p2_osc)
        + j.dV @ y2_total
        + 0.5 * np.sum(terms.theta1_osc * dt_log * sin2)
        + np.sum(ts * dt_log * cos2 * (s.phibar2 + terms.phi2_osc))
        + weighted_sin @ (j.d_log @ j.d_log.T) @ weighted_sin / 8.0
    )
    return ThermoRecord(
        E1_perp_osc=e1_perp,
        S1_osc=e1_perp / t0,
        E2_perp_osc=e2_perp,
        S2_osc=e2_perp / t0 - float(np.sum(j.d_log @ y2_total)) - e1_perp ** 2 / (2.0 * r * t0 ** 2),
        E1_par_osc=float(0.5 * np.sum(ts * dt_log * sin2)),
        E2_par_osc=e2_par,
    )


def thermo_series(
    model: ModelSpec,
    full_traj: Optional[Trajectory],
    slow_traj: Trajectory,
    eps: float,
    C: Optional[np.ndarray] = None,
) -> List[ThermoRecord]:
    """Records on the slow trajectory's grid; finite-eps fields only when full_traj is given."""
    if full_traj is not None and not np.array_equal(full_traj.times, slow_traj.times):
        raise GridMismatch("full and slow trajectories are not sampled on the same grid")
    system = SlowSystem(model, C)
    records = []
    fulls = full_states(model, full_traj) if full_traj is not None else None
    for k, s in enumerate(slow_states(model, slow_traj)):
        t = float(slow_traj.times[k])
        record = observables_leading(model, s.y0, s.p0, t=t)
        record = record.merge(observables_second(model, s, system=system))
        record = record.merge(oscillatory_observables(model, s, eps, system=system))
        if fulls is not None:
            record = record.merge(observables_eps(model, fulls[k], eps, t=t))
        records.append(record)
    logger.info(f"Assembled {len(records)} thermodynamic records")
    return records


# Relation checks

class FirstLawReport(BaseModel):
    steps: int
    dt: float
    max_residual: float
    mean_residual: float
    max_rate: float
    cumulative: float


def verify_first_law(records: Sequence[ThermoRecord], traj: Optional[Trajectory] = None) -> FirstLawReport:
    """
    Discrete residual of dE0_perp = F0 . dy0 + T0 dS0 between consecutive records.

    F0 and T0 are averaged over each interval. max_rate is the largest
    per-step residual divided by the step, which is O(dt^2).
    """
    times = np.array([rec.t for rec in records], dtype=float)
    if traj is not None:
        if not np.array_equal(traj.times, times):
            raise GridMismatch("records and trajectory are not sampled on the same grid")
        y0 = traj.columns([f"y{k + 1}" for k in range(len(records[0].F0))])
    else:
        y0 = np.array([rec.y0 for rec in records])
    if times.size < 2:
        return FirstLawReport(steps=0, dt=0.0, max_residual=0.0, mean_residual=0.0, max_rate=0.0, cumulative=0.0)
    steps = np.diff(times)
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        raise GridMismatch("records are not on a uniform grid")
    energy = np.array([rec.E0_perp for rec in records])
    temperature = np.array([rec.T0 for rec in records])
    entropy = np.array([rec.S0 for rec in records])
    force = np.array([rec.F0 for rec in records])

    f_mid = 0.5 * (force[1:] + force[:-1])
    t_mid = 0.5 * (temperature[1:] + temperature[:-1])
    signed = np.diff(energy) - np.sum(f_mid * np.diff(y0, axis=0), axis=1) - t_mid * np.diff(entropy)
    residual = np.abs(signed)
    return FirstLawReport(
        steps=int(residual.size),
        dt=float(steps[0]),
        max_residual=float(residual.max()),
        mean_residual=float(residual.mean()),
        max_rate=float(np.max(residual / steps)),
        cumulative=float(abs(signed.sum())),
    )


class ConstituentReport(BaseModel):
    h: float
    temperature_residual: float
    force_residual: float
    identity_residual: float


def verify_constituents(model: ModelSpec, s: SlowState, h: float = 1e-3, C: Optional[np.ndarray] = None) -> ConstituentReport:
    """
    Check dEbar2_perp/dSbar2 = T0 and dEbar2_perp/dybar2 = F0 (relative residuals).

    Each difference re-evaluates Ebar2_perp and Sbar2 at a perturbed slow
    state. Shifting the thetabar2 constants moves Sbar2 at fixed ybar2;
    shifting ybar2_i moves both, and the entropy part is removed with the
    measured temperature.
    """
    if not h > 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    base = SlowSystem(model, C)
    leading = observables_leading(model, s.y0, s.p0)
    second = observables_second(model, s, system=base)
    t0, f0 = leading.T0, leading.F0

    def evaluate(state: SlowState, system: SlowSystem) -> np.ndarray:
        record = observables_second(model, state, system=system)
        return np.array([record.Ebar2_perp, record.Sbar2])

    up = evaluate(s, SlowSystem(model, base.C + h))
    down = evaluate(s, SlowSystem(model, base.C - h))
    d_entropy = (up[0] - down[0]) / (up[1] - down[1])

    force_errors = []
    for i in range(model.n):
        shift = np.zeros(model.n)
        shift[i] = h
        up = evaluate(replace(s, ybar2=s.ybar2 + shift), base)
        down = evaluate(replace(s, ybar2=s.ybar2 - shift), base)
        d_y = (up[0] - down[0] - d_entropy * (up[1] - down[1])) / (2.0 * h)
        force_errors.append(abs(d_y - f0[i]) / max(abs(f0[i]), 1.0))
    scale = max(abs(second.Ebar2_perp), 1.0)
    return ConstituentReport(
        h=h,
        temperature_residual=abs(d_entropy - t0) / abs(t0),
        force_residual=float(max(force_errors)),
        identity_residual=abs(second.Ebar2_perp_from_entropy - second.Ebar2_perp) / scale,
    )


class ConstraintReport(BaseModel):
    max_abs: float
    initial_abs: float
    tolerance: float
    passed: bool


def verify_constraint(records: Sequence[ThermoRecord], dt: float, coeff: float = 100.0) -> ConstraintReport:
    """max_t |Ebar2_perp + Ebar2_par| against max(coeff dt^2, 1e-12)."""
    values = np.array([abs(rec.Ebar2_perp + rec.Ebar2_par) for rec in records])
    tolerance = max(coeff * dt ** 2, 1e-12)
    max_abs = float(values.max())
    if max_abs > tolerance:
        logger.warning(f"Averaged second-order energy reaches {max_abs:.3e} (tolerance {tolerance:.3e})")
    return ConstraintReport(max_abs=max_abs, initial_abs=float(values[0]), tolerance=tolerance, passed=max_abs <= tolerance)
