"""
Fixed-step symplectic partitioned Runge-Kutta integration.

Positions are advanced with the 2-stage Lobatto IIIA tableau and momenta
with the 2-stage Lobatto IIIB tableau. For this pair the first position
stage equals the current position and both momentum stages coincide, so a
step reduces to

    P = p + h/2 g(q, P, t)
    q' = q + h/2 (f(q, P, t) + f(q', P, t + h))
    p' = P + h/2 g(q', P, t + h)

where the first two equations are implicit and solved by fixed-point
iteration starting from the current state. When f depends on p only and g
on q only the equations are explicit and the step is the Stormer-Verlet
scheme.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .config import FP_MAX_ITERS, FP_TOL
from .errors import (
    FastSlowError,
    FixedPointDivergence,
    InvalidGrid,
    ModelError,
    ModelEvaluationFailed,
    NonFiniteState,
    RhsError,
)

logger = logging.getLogger(__name__)

VectorField = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ButcherPair:
    cA: np.ndarray
    aA: np.ndarray
    bA: np.ndarray
    cB: np.ndarray
    aB: np.ndarray
    bB: np.ndarray


def lobatto_pair() -> ButcherPair:
    """The 2-stage Lobatto IIIA (positions) / IIIB (momenta) pair."""
    return ButcherPair(
        cA=np.array([0.0, 1.0]),
        aA=np.array([[0.0, 0.0], [0.5, 0.5]]),
        bA=np.array([0.5, 0.5]),
        cB=np.array([0.0, 1.0]),
        aB=np.array([[0.5, 0.0], [0.5, 0.0]]),
        bB=np.array([0.5, 0.5]),
    )


_PAIR = lobatto_pair()


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float
    fp_tol: float = FP_TOL
    fp_max_iters: int = FP_MAX_ITERS
    output_stride: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidGrid(f"dt must be positive, got {self.dt}")
        if not self.fp_tol > 0:
            raise ValueError(f"fp_tol must be positive, got {self.fp_tol}")
        if self.fp_max_iters < 1:
            raise ValueError(f"fp_max_iters must be at least 1, got {self.fp_max_iters}")
        if self.output_stride < 1:
            raise InvalidGrid(f"output_stride must be at least 1, got {self.output_stride}")


@dataclass(frozen=True)
class PartitionedSystem:
    """q' = rhs_q(t, q, p), p' = rhs_p(t, q, p); separable when rhs_q ignores q and rhs_p ignores p."""

    rhs_q: VectorField
    rhs_p: VectorField
    separable: bool = False


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    labels: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states.reshape(-1, 1)
        if states.shape[0] != times.shape[0]:
            raise InvalidGrid(f"{times.shape[0]} times but {states.shape[0]} states")
        labels = tuple(self.labels) or tuple(f"x{k + 1}" for k in range(states.shape[1]))
        if len(labels) != states.shape[1]:
            raise InvalidGrid(f"{len(labels)} labels for {states.shape[1]} columns")
        if times.size > 1:
            steps = np.diff(times)
            if np.any(steps <= 0):
                raise InvalidGrid("times must be strictly increasing")
            if not np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
                raise InvalidGrid("times must be uniformly spaced")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.times.size

    @property
    def spacing(self) -> float:
        if self.times.size < 2:
            return 0.0
        return (self.times[-1] - self.times[0]) / (self.times.size - 1)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.states[:, self.labels.index(name)]
        except ValueError:
            raise KeyError(f"no column {name!r}; available: {list(self.labels)}") from None

    def columns(self, names: Sequence[str]) -> np.ndarray:
        return np.column_stack([self.column(name) for name in names])

    def select(self, names: Sequence[str]) -> "Trajectory":
        return Trajectory(self.times, self.columns(names), tuple(names))

    def with_columns(self, names: Sequence[str], values: np.ndarray) -> "Trajectory":
        values = np.asarray(values, dtype=float).reshape(self.times.size, -1)
        return Trajectory(self.times, np.hstack([self.states, values]), self.labels + tuple(names))

    def subsample(self, stride: int) -> "Trajectory":
        if stride < 1:
            raise InvalidGrid(f"stride must be at least 1, got {stride}")
        return Trajectory(self.times[::stride], self.states[::stride], self.labels)

    def final(self) -> np.ndarray:
        return self.states[-1]


def aligned_step(span: float, dt: float) -> float:
    """Largest step not above dt that divides span into whole steps."""
    steps = max(1, math.ceil(span / dt - 1e-9))
    return span / steps


def dyadic_step(span: float, dt: float, base: int = 2) -> float:
    """Largest span / base**k (k >= 0) not above dt."""
    k = max(0, math.ceil(math.log(span / dt, base) - 1e-12))
    return span / base ** k


def _call(rhs: VectorField, t: float, q: np.ndarray, p: np.ndarray) -> np.ndarray:
    try:
        return np.asarray(rhs(t, q, p), dtype=float)
    except ModelError as exc:
        raise ModelEvaluationFailed(t, exc) from exc
    except FastSlowError:
        raise
    except Exception as exc:
        raise RhsError(f"right-hand side failed at t = {t:.6g}: {exc}") from exc


def _advance(
    rhs_q: VectorField,
    rhs_p: VectorField,
    t: float,
    q: np.ndarray,
    p: np.ndarray,
    h: float,
    cfg: IntegratorConfig,
    separable: bool,
    g_start: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One step; returns (q', p', g at the end point) so separable runs can reuse it."""
    a_mom = _PAIR.aB[0, 0]
    a_pos0, a_pos1 = _PAIR.aA[1]
    b_mom = _PAIR.bB[1]
    t_end = t + _PAIR.cA[1] * h

    if separable:
        g0 = _call(rhs_p, t, q, p) if g_start is None else g_start
        p_mid = p + h * a_mom * g0
        f_mid = _call(rhs_q, t, q, p_mid)
        q_new = q + h * (a_pos0 + a_pos1) * f_mid
        g1 = _call(rhs_p, t_end, q_new, p_mid)
        return q_new, p_mid + h * b_mom * g1, g1

    p_mid = p
    for iteration in range(1, cfg.fp_max_iters + 1):
        update = p + h * a_mom * _call(rhs_p, t, q, p_mid)
        residual = float(np.max(np.abs(update - p_mid))) if update.size else 0.0
        p_mid = update
        if residual <= cfg.fp_tol:
            break
    else:
        raise FixedPointDivergence(t, residual, cfg.fp_max_iters)

    f0 = _call(rhs_q, t, q, p_mid)
    q_new = q
    for iteration in range(1, cfg.fp_max_iters + 1):
        update = q + h * (a_pos0 * f0 + a_pos1 * _call(rhs_q, t_end, q_new, p_mid))
        residual = float(np.max(np.abs(update - q_new))) if update.size else 0.0
        q_new = update
        if residual <= cfg.fp_tol:
            break
    else:
        raise FixedPointDivergence(t, residual, cfg.fp_max_iters)

    g1 = _call(rhs_p, t_end, q_new, p_mid)
    return q_new, p_mid + h * b_mom * g1, g1


def step(
    rhs_q: VectorField,
    rhs_p: VectorField,
    t: float,
    q: np.ndarray,
    p: np.ndarray,
    cfg: IntegratorConfig,
    h: Optional[float] = None,
    separable: bool = False,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Advance (q, p) by one step.

    Args:
        rhs_q: position rate f(t, q, p)
        rhs_p: momentum rate g(t, q, p)
        t: current time
        q, p: current state
        cfg: integrator settings
        h: signed step overriding cfg.dt (a negative step integrates backwards)
        separable: f depends on p only and g on q only

    Returns:
        The advanced (q, p)

    Raises:
        FixedPointDivergence: stage equations did not converge within fp_max_iters
        RhsError: a callback raised a non-library exception
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    q_new, p_new, _ = _advance(rhs_q, rhs_p, t, q, p, cfg.dt if h is None else h, cfg, separable)
    return q_new, p_new


def integrate(
    rhs_q: VectorField,
    rhs_p: VectorField,
    t0: float,
    q0,
    p0,
    cfg: IntegratorConfig,
    T: float,
    separable: bool = False,
    labels: Optional[Sequence[str]] = None,
) -> Trajectory:
    """Integrate from t0 to T, sampling every cfg.output_stride steps (t0 and T included)."""
    span = T - t0
    if span < 0:
        raise InvalidGrid(f"T = {T} precedes t0 = {t0}")
    n_steps = int(round(span / cfg.dt))
    if not math.isclose(n_steps * cfg.dt, span, rel_tol=1e-12, abs_tol=1e-15):
        raise InvalidGrid(f"dt = {cfg.dt!r} does not divide [{t0}, {T}] into whole steps")
    if n_steps % cfg.output_stride:
        raise InvalidGrid(f"{n_steps} steps are not a multiple of output_stride {cfg.output_stride}")

    q = np.array(q0, dtype=float)
    p = np.array(p0, dtype=float)
    n_q = q.size
    samples = n_steps // cfg.output_stride + 1
    states = np.empty((samples, n_q + p.size))
    states[0, :n_q], states[0, n_q:] = q, p
    if labels is None:
        labels = [f"q{k + 1}" for k in range(n_q)] + [f"p{k + 1}" for k in range(p.size)]

    g_cached = None
    row = 1
    for k in range(n_steps):
        t = t0 + k * cfg.dt
        q, p, g_end = _advance(rhs_q, rhs_p, t, q, p, cfg.dt, cfg, separable, g_cached)
        if separable:
            g_cached = g_end
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise NonFiniteState(t + cfg.dt)
        if (k + 1) % cfg.output_stride == 0:
            states[row, :n_q], states[row, n_q:] = q, p
            row += 1

    times = t0 + cfg.dt * cfg.output_stride * np.arange(samples)
    return Trajectory(times, states, tuple(labels))


def integrate_system(
    system: PartitionedSystem,
    t0: float,
    q0,
    p0,
    cfg: IntegratorConfig,
    T: float,
    labels: Optional[List[str]] = None,
) -> Trajectory:
    return integrate(system.rhs_q, system.rhs_p, t0, q0, p0, cfg, T, system.separable, labels)
