"""
Exception hierarchy for the fast-slow homogenizer.

Every error raised by the library derives from FastSlowError so that the
CLI and the service can translate failures into exit codes and HTTP
responses by family.
"""

from typing import Optional, Sequence


class FastSlowError(Exception):
    """Base class for all library errors."""


# Model definition and evaluation

class ModelError(FastSlowError):
    """Invalid model definition or evaluation outside the model's domain."""


class MalformedExpression(ModelError, ValueError):
    """An expression string does not conform to the grammar."""

    def __init__(self, message: str, text: str = "", position: Optional[int] = None):
        self.text = text
        self.position = position
        if position is not None:
            message = f"{message} at position {position} in {text!r}"
        super().__init__(message)


class DimensionMismatch(ModelError, ValueError):
    """Vector lengths disagree with the declared dimensions."""


class NonPositiveFrequencyAtStart(ModelError):
    """A frequency is not above the floor at the initial slow position."""


class DomainError(ModelError):
    """log of a non-positive argument, or division by zero."""


class FrequencyNotPositive(ModelError):
    """A frequency dropped to or below the floor during evaluation."""

    def __init__(self, channel: int, value: float, y: Sequence[float], floor: float):
        self.channel = channel
        self.value = value
        self.y = list(y)
        self.floor = floor
        super().__init__(
            f"omega_{channel} = {value:.6g} <= floor {floor:.3g} at y = {self.y}"
        )


# Integration

class IntegrationError(FastSlowError):
    """Failure while advancing an ODE system."""


class FixedPointDivergence(IntegrationError):
    """Implicit stage equations did not converge."""

    def __init__(self, t: float, residual: float, iterations: int):
        self.t = t
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"fixed-point residual {residual:.3e} after {iterations} iterations at t = {t:.6g}"
        )


class RhsError(IntegrationError):
    """A right-hand side callback raised an unexpected exception."""


class NonFiniteState(IntegrationError):
    """The integrated state contains NaN or infinity."""

    def __init__(self, t: float):
        self.t = t
        super().__init__(f"non-finite state at t = {t:.6g}")


class ModelEvaluationFailed(IntegrationError):
    """A model evaluation failed while a system was being advanced."""

    def __init__(self, t: float, cause: Exception):
        self.t = t
        self.cause = cause
        super().__init__(f"{type(cause).__name__} at t = {t:.6g}: {cause}")


class InvalidGrid(IntegrationError, ValueError):
    """Step size, horizon and output stride do not form a uniform grid."""


# Dynamics and corrections

class SystemsError(FastSlowError):
    """Failure in the transformations or correction terms."""


class UndefinedAngle(SystemsError):
    """z and zdot vanish together, so the angle variable is undefined."""

    def __init__(self, channel: int):
        self.channel = channel
        super().__init__(f"angle of fast channel {channel} is undefined (z = zdot = 0)")


class ResonanceTooClose(SystemsError):
    """Two frequencies are closer than the resonance tolerance."""

    def __init__(self, pair: tuple, gap: float, tol: float):
        self.pair = pair
        self.gap = gap
        self.tol = tol
        super().__init__(
            f"|omega_{pair[0]} - omega_{pair[1]}| = {gap:.3e} below resonance tolerance {tol:.3e}"
        )


# Thermodynamics

class ThermoError(FastSlowError):
    """Thermodynamic observable is undefined."""


class ZeroFastEnergy(ThermoError):
    """The fast subsystem carries no energy, so entropy is undefined."""


# Experiment harness

class AnalysisError(FastSlowError):
    """Failure while comparing or post-processing trajectories."""


class GridMismatch(AnalysisError):
    """Two series are not sampled on the same time grid."""


class NoPlateau(AnalysisError):
    """Errors at the smallest step sizes have not settled."""
