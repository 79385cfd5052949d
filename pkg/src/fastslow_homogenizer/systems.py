"""
Dynamics of the fast-slow model on its three levels.

* the full system in (y, z) coordinates, stiff with frequencies omega/eps;
* the same system in action-angle coordinates (phi, theta, y, p);
* the homogenized limit (y0, p0) and the second-order averaged corrections
  (ybar2, pbar2, phibar2), integrated as one coupled slow system.

The oscillatory correction terms and the closed form of thetabar2 are
evaluated from exact jets of V and the frequencies; total time derivatives
along the homogenized motion are expanded by the chain rule with
ydot0 = p0 and pdot0 from the homogenized equations.
"""

import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel

from .errors import ResonanceTooClose, UndefinedAngle
from .integrator import IntegratorConfig, PartitionedSystem, Trajectory, integrate
from .model import ModelSpec, frequency_jets, theta_star, v_jet

logger = logging.getLogger(__name__)


def _names(prefix: str, count: int) -> List[str]:
    sep = "_" if prefix[-1].isdigit() else ""
    return [f"{prefix}{sep}{k + 1}" for k in range(count)]


# States

@dataclass(frozen=True)
class FullState:
    y: np.ndarray
    ydot: np.ndarray
    z: np.ndarray
    zdot: np.ndarray

    @classmethod
    def initial(cls, model: ModelSpec) -> "FullState":
        """y = y*, ydot = p*, z = 0, zdot = u*."""
        return cls(model.y_star.copy(), model.p_star.copy(), np.zeros(model.r), model.u_star.copy())

    def split(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.concatenate([self.y, self.z]), np.concatenate([self.ydot, self.zdot])

    @classmethod
    def join(cls, q: np.ndarray, p: np.ndarray, n: int) -> "FullState":
        return cls(q[:n], p[:n], q[n:], p[n:])

    @staticmethod
    def labels(n: int, r: int) -> List[str]:
        # ydot is the slow momentum, so it is labelled p
        return _names("y", n) + _names("z", r) + _names("p", n) + _names("zdot", r)


@dataclass(frozen=True)
class TransformedState:
    phi: np.ndarray
    theta: np.ndarray
    y: np.ndarray
    p: np.ndarray

    def split(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.concatenate([self.phi, self.y]), np.concatenate([self.theta, self.p])

    @classmethod
    def join(cls, q: np.ndarray, p: np.ndarray, r: int) -> "TransformedState":
        return cls(q[:r], p[:r], q[r:], p[r:])

    @staticmethod
    def labels(n: int, r: int) -> List[str]:
        return _names("phi", r) + _names("y", n) + _names("theta", r) + _names("p", n)


@dataclass(frozen=True)
class SlowState:
    y0: np.ndarray
    p0: np.ndarray
    phi0: np.ndarray
    ybar2: np.ndarray
    pbar2: np.ndarray
    phibar2: np.ndarray

    def split(self) -> Tuple[np.ndarray, np.ndarray]:
        """Positions (y0, phi0, ybar2, phibar2) and momenta (p0, pbar2)."""
        return (
            np.concatenate([self.y0, self.phi0, self.ybar2, self.phibar2]),
            np.concatenate([self.p0, self.pbar2]),
        )

    @classmethod
    def join(cls, q: np.ndarray, p: np.ndarray, n: int, r: int) -> "SlowState":
        return cls(
            y0=q[:n],
            p0=p[:n],
            phi0=q[n:n + r],
            ybar2=q[n + r:2 * n + r],
            pbar2=p[n:],
            phibar2=q[2 * n + r:],
        )

    @classmethod
    def from_row(cls, row: np.ndarray, n: int, r: int) -> "SlowState":
        size = 2 * n + 2 * r
        return cls.join(row[:size], row[size:size + 2 * n], n, r)

    @staticmethod
    def labels(n: int, r: int) -> List[str]:
        return (
            _names("y", n) + _names("phi0", r) + _names("ybar2", n) + _names("phibar2", r)
            + _names("p", n) + _names("pbar2", n)
        )


@dataclass(frozen=True)
class CorrectionTerms:
    theta1_osc: np.ndarray
    phi2_osc: np.ndarray
    y2_osc: np.ndarray
    p2_osc: np.ndarray
    theta2_osc: np.ndarray
    thetabar2: np.ndarray


# Jets of V and every frequency at one slow position

@dataclass(frozen=True)
class SlowJets:
    V: float
    dV: np.ndarray
    ddV: np.ndarray
    omega: np.ndarray
    d_omega: np.ndarray
    dd_omega: np.ndarray
    d_log: np.ndarray
    dd_log: np.ndarray


def slow_jets(model: ModelSpec, y) -> SlowJets:
    v = v_jet(model, y)
    f = frequency_jets(model, y)
    return SlowJets(v.value, v.gradient, v.hessian, f.omega, f.d_omega, f.dd_omega, f.d_log, f.dd_log)


# Full system

def _full_forces(model: ModelSpec, y: np.ndarray, z: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
    v = v_jet(model, y, order=1)
    f = frequency_jets(model, y, order=1)
    stiff = eps ** -2
    ydd = -v.gradient - stiff * (f.omega * z ** 2) @ f.d_omega
    zdd = -stiff * f.omega ** 2 * z
    return ydd, zdd


def full_rhs(model: ModelSpec, t: float, state: FullState, eps: float) -> FullState:
    """Time derivative of (y, ydot, z, zdot) with U = 1/2 sum omega^2 z^2."""
    ydd, zdd = _full_forces(model, state.y, state.z, eps)
    return FullState(state.ydot.copy(), ydd, state.zdot.copy(), zdd)


def full_system(model: ModelSpec, eps: float) -> PartitionedSystem:
    n = model.n

    def rhs_q(t, q, p):
        return p

    def rhs_p(t, q, p):
        return np.concatenate(_full_forces(model, q[:n], q[n:], eps))

    return PartitionedSystem(rhs_q, rhs_p, separable=True)


def full_energy(model: ModelSpec, state: FullState, eps: float) -> float:
    omega = frequency_jets(model, state.y, order=1).omega
    stiff = 0.5 * np.sum(omega ** 2 * state.z ** 2) / eps ** 2
    kinetic = 0.5 * (state.ydot @ state.ydot + state.zdot @ state.zdot)
    return float(kinetic + v_jet(model, state.y, order=1).value + stiff)


# Action-angle coordinates

def _lift(phi: float, reference: float, eps: float) -> float:
    period = 2.0 * np.pi * eps
    return phi + period * np.round((reference - phi) / period)


def to_action_angle(
    model: ModelSpec,
    state: FullState,
    eps: float,
    reference_phi: Optional[np.ndarray] = None,
) -> TransformedState:
    """
    Map (y, ydot, z, zdot) to (phi, theta, y, p).

    The angle is defined up to multiples of 2 pi eps; with reference_phi the
    branch closest to the reference is returned, otherwise the principal one.
    A channel at rest (z = zdot = 0) has no angle and takes the reference,
    or raises UndefinedAngle when none is given.
    """
    f = frequency_jets(model, state.y, order=1)
    omega = f.omega
    theta = 0.5 * (state.zdot ** 2 / omega + omega * state.z ** 2 / eps ** 2)
    phi = np.empty(model.r)
    for lam in range(model.r):
        if state.z[lam] == 0.0 and state.zdot[lam] == 0.0:
            if reference_phi is None:
                raise UndefinedAngle(lam + 1)
            phi[lam] = reference_phi[lam]
            continue
        principal = eps * np.arctan2(omega[lam] * state.z[lam] / eps, state.zdot[lam])
        phi[lam] = principal if reference_phi is None else _lift(principal, reference_phi[lam], eps)
    sin2 = np.sin(2.0 * phi / eps)
    p = state.ydot - 0.5 * eps * (theta * sin2) @ f.d_log
    return TransformedState(phi, theta, state.y.copy(), p)


def from_action_angle(model: ModelSpec, state: TransformedState, eps: float) -> FullState:
    f = frequency_jets(model, state.y, order=1)
    omega = f.omega
    amplitude = np.sqrt(2.0 * state.theta / omega)
    z = eps * amplitude * np.sin(state.phi / eps)
    zdot = np.sqrt(2.0 * state.theta * omega) * np.cos(state.phi / eps)
    ydot = state.p + 0.5 * eps * (state.theta * np.sin(2.0 * state.phi / eps)) @ f.d_log
    return FullState(state.y.copy(), ydot, z, zdot)


def _transformed_parts(model: ModelSpec, phi, theta, y, p, eps):
    j = slow_jets(model, y)
    sin2 = np.sin(2.0 * phi / eps)
    cos2 = np.cos(2.0 * phi / eps)
    ydot = p + 0.5 * eps * (theta * sin2) @ j.d_log
    dt_log = j.d_log @ ydot
    phi_dot = j.omega + 0.5 * eps * dt_log * sin2
    theta_dot = -theta * dt_log * cos2
    dt_d_log = j.dd_log @ ydot  # (r, n): D_t D_j L
    p_dot = -j.dV - theta @ j.d_omega - 0.5 * eps * (theta * sin2) @ dt_d_log
    return phi_dot, theta_dot, ydot, p_dot


def transformed_rhs(model: ModelSpec, t: float, state: TransformedState, eps: float) -> TransformedState:
    phi_dot, theta_dot, ydot, p_dot = _transformed_parts(model, state.phi, state.theta, state.y, state.p, eps)
    return TransformedState(phi_dot, theta_dot, ydot, p_dot)


def transformed_system(model: ModelSpec, eps: float) -> PartitionedSystem:
    """Positions (phi, y), momenta (theta, p)."""
    r = model.r

    def rhs_q(t, q, p):
        phi_dot, _, ydot, _ = _transformed_parts(model, q[:r], p[:r], q[r:], p[r:], eps)
        return np.concatenate([phi_dot, ydot])

    def rhs_p(t, q, p):
        _, theta_dot, _, p_dot = _transformed_parts(model, q[:r], p[:r], q[r:], p[r:], eps)
        return np.concatenate([theta_dot, p_dot])

    return PartitionedSystem(rhs_q, rhs_p)


# Homogenized system

def homogenized_rhs(model: ModelSpec, t: float, y0, p0) -> Tuple[np.ndarray, np.ndarray]:
    return np.asarray(p0, dtype=float).copy(), _homogenized_force(model, theta_star(model), np.asarray(y0, dtype=float))


def _homogenized_force(model: ModelSpec, ts: np.ndarray, y0: np.ndarray) -> np.ndarray:
    v = v_jet(model, y0, order=1)
    f = frequency_jets(model, y0, order=1)
    return -v.gradient - ts @ f.d_omega


def homogenized_system(model: ModelSpec) -> PartitionedSystem:
    ts = theta_star(model)

    def rhs_q(t, q, p):
        return p

    def rhs_p(t, q, p):
        return _homogenized_force(model, ts, q)

    return PartitionedSystem(rhs_q, rhs_p, separable=True)


def homogenized_energy(model: ModelSpec, y0, p0) -> float:
    """1/2 |p0|^2 + V(y0) + sum theta* omega(y0), conserved by the homogenized flow."""
    y0 = np.asarray(y0, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    omega = frequency_jets(model, y0, order=1).omega
    return float(0.5 * p0 @ p0 + v_jet(model, y0, order=1).value + theta_star(model) @ omega)


# Second-order corrections

@dataclass(frozen=True)
class _Coefficients:
    theta1: np.ndarray      # (r,)   times sin(2 phi0/eps)
    phi2: np.ndarray        # (r,)   times cos(2 phi0/eps)
    y2: np.ndarray          # (r, n) times cos(2 phi0/eps)
    p2: np.ndarray          # (r, n) times cos(2 phi0/eps)
    theta2_c2: np.ndarray   # (r,)   times cos(2 phi0/eps)
    theta2_c4: np.ndarray   # (r,)   times cos(4 phi0/eps)
    pairs: np.ndarray       # (r, r) zero diagonal
    gaps: np.ndarray        # (r, r) omega_mu - omega_lambda
    sums: np.ndarray        # (r, r) omega_mu + omega_lambda


def _coefficients(j: SlowJets, ts: np.ndarray, p0: np.ndarray, phibar2: np.ndarray, tol: float) -> _Coefficients:
    omega = j.omega
    dt_log = j.d_log @ p0
    w = ts / (4.0 * omega)
    dd_log_p0 = j.dd_log @ p0  # (r, n)
    cross = j.d_log @ j.d_omega.T  # <DL_lam, Domega_mu>
    theta2_c2 = (
        ts * (cross @ ts) / (4.0 * omega ** 2)
        - ts * (dd_log_p0 @ p0) / (4.0 * omega ** 2)
        + ts * dt_log ** 2 / (4.0 * omega ** 2)
        - ts * dt_log * phibar2 / omega
        + ts * (j.d_log @ j.dV) / (4.0 * omega ** 2)
    )
    theta2_c4 = ts ** 2 * np.sum(j.d_log ** 2, axis=1) / (16.0 * omega)
    pairs = np.outer(ts, ts) * (j.d_log @ j.d_log.T) / 8.0
    np.fill_diagonal(pairs, 0.0)
    gaps = omega[None, :] - omega[:, None]
    r = omega.size
    for lam in range(r):
        for mu in range(lam + 1, r):
            if abs(gaps[lam, mu]) < tol:
                raise ResonanceTooClose((lam + 1, mu + 1), abs(gaps[lam, mu]), tol)
    safe_gaps = gaps.copy()
    np.fill_diagonal(safe_gaps, 1.0)
    return _Coefficients(
        theta1=-ts * dt_log / (2.0 * omega),
        phi2=-dt_log / (4.0 * omega),
        y2=-w[:, None] * j.d_log,
        p2=w[:, None] * (dd_log_p0 - j.d_log * dt_log[:, None]),
        theta2_c2=theta2_c2,
        theta2_c4=theta2_c4,
        pairs=pairs,
        gaps=safe_gaps,
        sums=omega[None, :] + omega[:, None],
    )


def _theta_bar2(j: SlowJets, ts: np.ndarray, p0: np.ndarray, C: np.ndarray) -> np.ndarray:
    dt_log = j.d_log @ p0
    return ts * dt_log ** 2 / (8.0 * j.omega ** 2) + C


def _oscillatory(k: _Coefficients, phi0: np.ndarray, eps: float) -> Dict[str, np.ndarray]:
    sin2 = np.sin(2.0 * phi0 / eps)
    cos2 = np.cos(2.0 * phi0 / eps)
    cos4 = np.cos(4.0 * phi0 / eps)
    minus = np.cos(2.0 * (phi0[None, :] - phi0[:, None]) / eps)
    plus = np.cos(2.0 * (phi0[None, :] + phi0[:, None]) / eps)
    theta2 = (
        k.theta2_c2 * cos2
        + k.theta2_c4 * cos4
        + np.sum(k.pairs * (minus / k.gaps + plus / k.sums), axis=1)
    )
    return {
        "theta1_osc": k.theta1 * sin2,
        "phi2_osc": k.phi2 * cos2,
        "y2_osc": cos2 @ k.y2,
        "p2_osc": cos2 @ k.p2,
        "theta2_osc": theta2,
    }


class SecondOrderInitials(NamedTuple):
    ybar2: np.ndarray
    pbar2: np.ndarray
    phibar2: np.ndarray
    C: np.ndarray


def second_order_initials(model: ModelSpec) -> SecondOrderInitials:
    """
    Initial averaged corrections and the thetabar2 integration constant.

    At t = 0 the leading phase vanishes, so every oscillatory term takes its
    eps-independent value. phibar2(0) is fixed first because [theta2](0)
    depends on it; C then makes thetabar2(0) = -[theta2](0).
    """
    j = slow_jets(model, model.y_star)
    ts = theta_star(model)
    p_star = model.p_star
    zero = np.zeros(model.r)
    phibar2 = -_oscillatory(_coefficients(j, ts, p_star, zero, model.resonance_tol), zero, 1.0)["phi2_osc"]
    terms = _oscillatory(_coefficients(j, ts, p_star, phibar2, model.resonance_tol), zero, 1.0)
    C = -_theta_bar2(j, ts, p_star, zero) - terms["theta2_osc"]
    return SecondOrderInitials(-terms["y2_osc"], -terms["p2_osc"], phibar2, C)


def initial_slow_state(model: ModelSpec) -> Tuple[SlowState, np.ndarray]:
    init = second_order_initials(model)
    state = SlowState(
        y0=model.y_star.copy(),
        p0=model.p_star.copy(),
        phi0=np.zeros(model.r),
        ybar2=init.ybar2,
        pbar2=init.pbar2,
        phibar2=init.phibar2,
    )
    return state, init.C


class SlowSystem:
    """
    The homogenized motion and the averaged second-order corrections as one
    autonomous system.

    Jets are cached by slow position: the stage iterations of one step
    revisit the same y0 several times.
    """

    def __init__(self, model: ModelSpec, C: Optional[np.ndarray] = None):
        self.model = model
        self.theta_star = theta_star(model)
        self.C = second_order_initials(model).C if C is None else np.asarray(C, dtype=float)
        self._cached = lru_cache(maxsize=16)(self._jets_from_key)

    def _jets_from_key(self, key: Tuple[float, ...]) -> SlowJets:
        return slow_jets(self.model, np.array(key))

    def jets(self, y0: np.ndarray) -> SlowJets:
        return self._cached(tuple(float(v) for v in y0))

    # right-hand sides

    def position_rates(self, y0, phi0, ybar2, phibar2, p0, pbar2) -> np.ndarray:
        j = self.jets(y0)
        ts = self.theta_star
        dt_log = j.d_log @ p0
        ybar2_dot = pbar2 - (ts * dt_log / (4.0 * j.omega)) @ j.d_log
        phibar2_dot = (
            j.d_omega @ ybar2
            + ts * np.sum(j.d_log ** 2, axis=1) / 8.0
            - dt_log ** 2 / (8.0 * j.omega)
        )
        return np.concatenate([p0, j.omega, ybar2_dot, phibar2_dot])

    def momentum_rates(self, y0, ybar2, p0) -> np.ndarray:
        j = self.jets(y0)
        ts = self.theta_star
        dt_log = j.d_log @ p0
        thetabar2 = _theta_bar2(j, ts, p0, self.C)
        p0_dot = -j.dV - ts @ j.d_omega
        pbar2_dot = (
            -j.ddV @ ybar2
            - thetabar2 @ j.d_omega
            - np.einsum("l,lij,j->i", ts, j.dd_omega, ybar2)
            - np.einsum("l,lij,lj->i", ts ** 2, j.dd_log, j.d_log) / 8.0
            + (ts * dt_log / (4.0 * j.omega)) @ (j.dd_log @ p0)
        )
        return np.concatenate([p0_dot, pbar2_dot])

    def partitioned(self) -> PartitionedSystem:
        n, r = self.model.n, self.model.r

        def rhs_q(t, q, p):
            return self.position_rates(q[:n], q[n:n + r], q[n + r:2 * n + r], q[2 * n + r:], p[:n], p[n:])

        def rhs_p(t, q, p):
            return self.momentum_rates(q[:n], q[n + r:2 * n + r], p[:n])

        return PartitionedSystem(rhs_q, rhs_p)

    def rhs(self, t: float, s: SlowState) -> SlowState:
        q, p = s.split()
        system = self.partitioned()
        return SlowState.join(system.rhs_q(t, q, p), system.rhs_p(t, q, p), self.model.n, self.model.r)

    # closed forms

    def theta_bar2(self, y0, p0) -> np.ndarray:
        return _theta_bar2(self.jets(np.asarray(y0, dtype=float)), self.theta_star, np.asarray(p0, dtype=float), self.C)

    def theta_bar2_rate(self, y0, p0) -> np.ndarray:
        """Time derivative of thetabar2 along the homogenized motion."""
        y0 = np.asarray(y0, dtype=float)
        p0 = np.asarray(p0, dtype=float)
        j = self.jets(y0)
        ts = self.theta_star
        p0_dot = -j.dV - ts @ j.d_omega
        a = j.d_omega @ p0
        a_dot = j.d_omega @ p0_dot + np.einsum("i,lij,j->l", p0, j.dd_omega, p0)
        return ts / 8.0 * (2.0 * a * a_dot / j.omega ** 4 - 4.0 * a ** 3 / j.omega ** 5)

    def correction_terms(self, s: SlowState, eps: float) -> CorrectionTerms:
        j = self.jets(s.y0)
        k = _coefficients(j, self.theta_star, s.p0, s.phibar2, self.model.resonance_tol)
        return CorrectionTerms(thetabar2=_theta_bar2(j, self.theta_star, s.p0, self.C), **_oscillatory(k, s.phi0, eps))

    def correction_envelopes(self, s: SlowState) -> CorrectionTerms:
        j = self.jets(s.y0)
        k = _coefficients(j, self.theta_star, s.p0, s.phibar2, self.model.resonance_tol)
        pair_bound = np.sum(np.abs(k.pairs) * (1.0 / np.abs(k.gaps) + 1.0 / k.sums), axis=1)
        return CorrectionTerms(
            theta1_osc=np.abs(k.theta1),
            phi2_osc=np.abs(k.phi2),
            y2_osc=np.sum(np.abs(k.y2), axis=0),
            p2_osc=np.sum(np.abs(k.p2), axis=0),
            theta2_osc=np.abs(k.theta2_c2) + np.abs(k.theta2_c4) + pair_bound,
            thetabar2=np.abs(_theta_bar2(j, self.theta_star, s.p0, self.C)),
        )

    # averaged second-order energy

    def energy_parts(self, s: SlowState) -> Tuple[float, float]:
        """(Ebar2_par, Ebar2_perp)."""
        j = self.jets(s.y0)
        ts = self.theta_star
        dt_log = j.d_log @ s.p0
        par = (
            s.p0 @ s.pbar2
            + j.dV @ s.ybar2
            - np.sum(ts * dt_log ** 2 / (4.0 * j.omega))
            + np.sum(ts ** 2 * np.sum(j.d_log ** 2, axis=1)) / 16.0
        )
        perp = _theta_bar2(j, ts, s.p0, self.C) @ j.omega + ts @ (j.d_omega @ s.ybar2)
        return float(par), float(perp)

    def energy(self, s: SlowState) -> float:
        return sum(self.energy_parts(s))


def slow_system(model: ModelSpec, C: Optional[np.ndarray] = None) -> SlowSystem:
    return SlowSystem(model, C)


def coupled_slow_rhs(model: ModelSpec, t: float, s: SlowState, C: Optional[np.ndarray] = None) -> SlowState:
    return SlowSystem(model, C).rhs(t, s)


def theta_bar2(model: ModelSpec, y0, p0, C) -> np.ndarray:
    return SlowSystem(model, C).theta_bar2(y0, p0)


def theta_bar2_rate(model: ModelSpec, y0, p0, C=None) -> np.ndarray:
    return SlowSystem(model, np.zeros(model.r) if C is None else C).theta_bar2_rate(y0, p0)


def correction_terms(model: ModelSpec, s: SlowState, eps: float, C: Optional[np.ndarray] = None) -> CorrectionTerms:
    """
    Oscillatory correction terms at a slow state.

    Raises:
        ResonanceTooClose: two frequencies at y0 are closer than the model's resonance tolerance
    """
    return SlowSystem(model, C).correction_terms(s, eps)


def correction_envelopes(model: ModelSpec, s: SlowState, C: Optional[np.ndarray] = None) -> CorrectionTerms:
    """Amplitude bound of every oscillatory term at s (thetabar2 holds |thetabar2|)."""
    return SlowSystem(model, C).correction_envelopes(s)


def second_order_energy(model: ModelSpec, s: SlowState, C: Optional[np.ndarray] = None) -> float:
    return SlowSystem(model, C).energy(s)


def second_order_energy_gradients(
    model: ModelSpec, s: SlowState, C: Optional[np.ndarray] = None, h: float = 1e-6
) -> Tuple[np.ndarray, np.ndarray]:
    """Central differences of Ebar2: (dEbar2/dp0, -dEbar2/dy0)."""
    system = SlowSystem(model, C)
    d_p0 = np.empty(model.n)
    d_y0 = np.empty(model.n)
    for i in range(model.n):
        step = np.zeros(model.n)
        step[i] = h
        plus = SlowState(s.y0, s.p0 + step, s.phi0, s.ybar2, s.pbar2, s.phibar2)
        minus = SlowState(s.y0, s.p0 - step, s.phi0, s.ybar2, s.pbar2, s.phibar2)
        d_p0[i] = (system.energy(plus) - system.energy(minus)) / (2.0 * h)
        plus = SlowState(s.y0 + step, s.p0, s.phi0, s.ybar2, s.pbar2, s.phibar2)
        minus = SlowState(s.y0 - step, s.p0, s.phi0, s.ybar2, s.pbar2, s.phibar2)
        d_y0[i] = -(system.energy(plus) - system.energy(minus)) / (2.0 * h)
    return d_p0, d_y0


def reconstruct(y0, ybar2, y2_osc, eps: float) -> np.ndarray:
    """y0 + eps^2 (ybar2 + [y2])."""
    return np.asarray(y0) + eps ** 2 * (np.asarray(ybar2) + np.asarray(y2_osc))


# Resonance diagnostics

class ResonanceReport(BaseModel):
    order: int
    tol: float
    times: List[float]
    minima: List[float]
    gammas: List[List[int]]
    min_value: float
    min_time: float
    min_gamma: List[int]
    above_tol: bool
    passed: bool
    crossing_rates: Optional[List[float]] = None
    flat_times: List[float] = []


def _integer_vectors(r: int, order: int) -> List[np.ndarray]:
    """Integer vectors with |gamma|_1 = order, one of each +-gamma pair."""
    found = []
    for gamma in itertools.product(range(-order, order + 1), repeat=r):
        if sum(abs(g) for g in gamma) != order:
            continue
        first = next(g for g in gamma if g != 0)
        if first > 0:
            found.append(np.array(gamma))
    return found


def check_resonance(model: ModelSpec, traj: Trajectory, order: int = 2) -> ResonanceReport:
    """
    Minimum over |gamma|_1 = order of |sum gamma omega(y0(t))| at every grid time.

    above_tol records min_value >= tol at every order. For order 3 the rate
    of change of the minimizing combination is also reported, and passed
    only fails on a flat resonance: a time where both the value and its
    rate fall below the tolerance. Transversal crossings leave passed set
    while above_tol is False.
    """
    if order not in (2, 3):
        raise ValueError(f"resonance order must be 2 or 3, got {order}")
    y = traj.columns(_names("y", model.n))
    has_momentum = all(name in traj.labels for name in _names("p", model.n))
    p = traj.columns(_names("p", model.n)) if has_momentum else None
    gammas = np.array(_integer_vectors(model.r, order))
    tol = model.resonance_tol

    combos = np.empty((len(traj), len(gammas)))
    rates = np.empty_like(combos)
    for k, y_k in enumerate(y):
        f = frequency_jets(model, y_k, order=1)
        combos[k] = gammas @ f.omega
        if p is not None:
            rates[k] = gammas @ (f.d_omega @ p[k])
    if p is None:
        rates = np.gradient(combos, traj.times, axis=0) if len(traj) > 1 else np.zeros_like(combos)

    which = np.argmin(np.abs(combos), axis=1)
    rows = np.arange(len(traj))
    minima = np.abs(combos[rows, which])
    at = int(np.argmin(minima))
    report = dict(
        order=order,
        tol=tol,
        times=traj.times.tolist(),
        minima=minima.tolist(),
        gammas=gammas[which].tolist(),
        min_value=float(minima[at]),
        min_time=float(traj.times[at]),
        min_gamma=gammas[which[at]].tolist(),
        above_tol=bool(minima[at] >= tol),
        passed=bool(minima[at] >= tol),
    )
    if order == 3:
        crossing_rates = np.abs(rates[rows, which])
        flat = (minima < tol) & (crossing_rates < tol)
        report.update(
            crossing_rates=crossing_rates.tolist(),
            flat_times=traj.times[flat].tolist(),
            passed=not bool(np.any(flat)),
        )
    if not report["passed"]:
        logger.warning(f"Order-{order} resonance within {tol:.3e} at t = {report['min_time']:.6g}")
    return ResonanceReport(**report)


# Pipelines

def _config(dt: float, output_stride: int, **options) -> IntegratorConfig:
    return IntegratorConfig(dt=dt, output_stride=output_stride, **options)


def run_full(model: ModelSpec, eps: float, dt: float, T: Optional[float] = None, output_stride: int = 1, **options) -> Trajectory:
    """Integrate the full system from (y*, p*, 0, u*); columns y, z, p (= ydot), zdot."""
    T = model.T if T is None else T
    logger.info(f"Running full system: eps={eps:g}, dt={dt:.3e}, T={T:g}")
    q0, p0 = FullState.initial(model).split()
    system = full_system(model, eps)
    traj = integrate(
        system.rhs_q, system.rhs_p, 0.0, q0, p0, _config(dt, output_stride, **options), T,
        separable=True, labels=FullState.labels(model.n, model.r),
    )
    logger.info(f"Full system finished with {len(traj)} samples")
    return traj


def run_transformed(model: ModelSpec, eps: float, dt: float, T: Optional[float] = None, output_stride: int = 1, **options) -> Trajectory:
    """Integrate the action-angle system from (0, theta*, y*, p*)."""
    T = model.T if T is None else T
    logger.info(f"Running action-angle system: eps={eps:g}, dt={dt:.3e}, T={T:g}")
    start = TransformedState(np.zeros(model.r), theta_star(model), model.y_star.copy(), model.p_star.copy())
    q0, p0 = start.split()
    system = transformed_system(model, eps)
    return integrate(
        system.rhs_q, system.rhs_p, 0.0, q0, p0, _config(dt, output_stride, **options), T,
        labels=TransformedState.labels(model.n, model.r),
    )


def run_homogenized(model: ModelSpec, dt: float, T: Optional[float] = None, output_stride: int = 1, **options) -> Trajectory:
    T = model.T if T is None else T
    logger.info(f"Running homogenized system: dt={dt:.3e}, T={T:g}")
    system = homogenized_system(model)
    return integrate(
        system.rhs_q, system.rhs_p, 0.0, model.y_star, model.p_star, _config(dt, output_stride, **options), T,
        separable=True, labels=_names("y", model.n) + _names("p", model.n),
    )


def run_second_order(
    model: ModelSpec, eps: float, dt: float, T: Optional[float] = None, output_stride: int = 1, **options
) -> Trajectory:
    """
    Integrate the coupled slow system and append the reconstruction
    y0 + eps^2 (ybar2 + [y2]) as columns y_recon1..y_reconn.
    """
    T = model.T if T is None else T
    logger.info(f"Running second-order system: eps={eps:g}, dt={dt:.3e}, T={T:g}")
    start, C = initial_slow_state(model)
    system = SlowSystem(model, C)
    q0, p0 = start.split()
    partitioned = system.partitioned()
    traj = integrate(
        partitioned.rhs_q, partitioned.rhs_p, 0.0, q0, p0, _config(dt, output_stride, **options), T,
        labels=SlowState.labels(model.n, model.r),
    )
    recon = np.empty((len(traj), model.n))
    for k, row in enumerate(traj.states):
        s = SlowState.from_row(row, model.n, model.r)
        recon[k] = reconstruct(s.y0, s.ybar2, system.correction_terms(s, eps).y2_osc, eps)
    logger.info(f"Second-order system finished with {len(traj)} samples")
    return traj.with_columns(_names("y_recon", model.n), recon)


def slow_states(model: ModelSpec, traj: Trajectory) -> List[SlowState]:
    """SlowState at every sample of a second-order trajectory."""
    columns = traj.columns(SlowState.labels(model.n, model.r))
    return [SlowState.from_row(row, model.n, model.r) for row in columns]


def full_states(model: ModelSpec, traj: Trajectory) -> List[FullState]:
    columns = traj.columns(FullState.labels(model.n, model.r))
    q_size = model.n + model.r
    return [FullState.join(row[:q_size], row[q_size:], model.n) for row in columns]


def transform_trajectory(model: ModelSpec, traj: Trajectory, eps: float) -> Trajectory:
    """
    Action-angle columns (phi, y, theta, p) of a full trajectory.

    The angle is lifted continuously: each sample takes the branch nearest
    to the previous angle advanced by the mean frequency over the interval.
    """
    rows = []
    previous = None
    previous_omega = None
    for k, state in enumerate(full_states(model, traj)):
        omega = frequency_jets(model, state.y, order=1).omega
        if previous is None:
            reference = np.zeros(model.r)
        else:
            reference = previous.phi + 0.5 * (omega + previous_omega) * (traj.times[k] - traj.times[k - 1])
        current = to_action_angle(model, state, eps, reference_phi=reference)
        rows.append(np.concatenate(current.split()))
        previous, previous_omega = current, omega
    return Trajectory(traj.times, np.array(rows), tuple(TransformedState.labels(model.n, model.r)))
