"""
Second-order forward-mode differentiation with truncated Taylor jets.

A Jet2 carries the value, gradient and Hessian of a scalar function of the
slow variables. Arithmetic on jets propagates all three exactly, so the
Hessians are symmetric by construction. A jet built with order=1 skips the
Hessian (stored as None) for callers that only need first derivatives.
"""

from typing import Optional, Union

import numpy as np

from .errors import DomainError

Number = Union[int, float]


class Jet2:
    __slots__ = ("value", "gradient", "hessian")

    def __init__(self, value: float, gradient: np.ndarray, hessian: Optional[np.ndarray] = None):
        self.value = float(value)
        self.gradient = gradient
        self.hessian = hessian

    @classmethod
    def constant(cls, value: float, n: int, order: int = 2) -> "Jet2":
        hessian = np.zeros((n, n)) if order >= 2 else None
        return cls(value, np.zeros(n), hessian)

    @classmethod
    def variable(cls, y: np.ndarray, index: int, order: int = 2) -> "Jet2":
        """Seed jet of the coordinate y[index] (0-based)."""
        n = len(y)
        gradient = np.zeros(n)
        gradient[index] = 1.0
        hessian = np.zeros((n, n)) if order >= 2 else None
        return cls(y[index], gradient, hessian)

    @property
    def order(self) -> int:
        return 1 if self.hessian is None else 2

    def __repr__(self) -> str:
        return f"Jet2(value={self.value!r}, gradient={self.gradient!r}, hessian={self.hessian!r})"

    # arithmetic

    def __add__(self, other: Union["Jet2", Number]) -> "Jet2":
        if isinstance(other, Jet2):
            hessian = None if self.hessian is None or other.hessian is None else self.hessian + other.hessian
            return Jet2(self.value + other.value, self.gradient + other.gradient, hessian)
        return Jet2(self.value + other, self.gradient, self.hessian)

    def __radd__(self, other: Number) -> "Jet2":
        return self.__add__(other)

    def __neg__(self) -> "Jet2":
        hessian = None if self.hessian is None else -self.hessian
        return Jet2(-self.value, -self.gradient, hessian)

    def __sub__(self, other: Union["Jet2", Number]) -> "Jet2":
        if isinstance(other, Jet2):
            hessian = None if self.hessian is None or other.hessian is None else self.hessian - other.hessian
            return Jet2(self.value - other.value, self.gradient - other.gradient, hessian)
        return Jet2(self.value - other, self.gradient, self.hessian)

    def __rsub__(self, other: Number) -> "Jet2":
        return (-self).__add__(other)

    def __mul__(self, other: Union["Jet2", Number]) -> "Jet2":
        if isinstance(other, Jet2):
            a, b = self.value, other.value
            gradient = a * other.gradient + b * self.gradient
            hessian = None
            if self.hessian is not None and other.hessian is not None:
                cross = np.outer(self.gradient, other.gradient)
                hessian = a * other.hessian + b * self.hessian + (cross + cross.T)
            return Jet2(a * b, gradient, hessian)
        hessian = None if self.hessian is None else self.hessian * other
        return Jet2(self.value * other, self.gradient * other, hessian)

    def __rmul__(self, other: Number) -> "Jet2":
        return self.__mul__(other)

    def __truediv__(self, other: Union["Jet2", Number]) -> "Jet2":
        if isinstance(other, Jet2):
            return self * other.reciprocal()
        if other == 0:
            raise DomainError("division by zero")
        return self * (1.0 / other)

    def __rtruediv__(self, other: Number) -> "Jet2":
        return self.reciprocal() * other

    def __pow__(self, power: int) -> "Jet2":
        if not isinstance(power, (int, np.integer)):
            raise TypeError(f"only integer powers are supported, got {power!r}")
        k = int(power)
        if k == 0:
            return Jet2.constant(1.0, len(self.gradient), self.order)
        if k == 1:
            return self
        x = self.value
        if k < 0 and x == 0.0:
            raise DomainError(f"zero raised to negative power {k}")
        return self._compose(x ** k, k * x ** (k - 1), k * (k - 1) * x ** (k - 2))

    # elementary functions

    def reciprocal(self) -> "Jet2":
        x = self.value
        if x == 0.0:
            raise DomainError("division by zero")
        inv = 1.0 / x
        return self._compose(inv, -inv * inv, 2.0 * inv * inv * inv)

    def sin(self) -> "Jet2":
        s, c = np.sin(self.value), np.cos(self.value)
        return self._compose(s, c, -s)

    def cos(self) -> "Jet2":
        s, c = np.sin(self.value), np.cos(self.value)
        return self._compose(c, -s, -c)

    def exp(self) -> "Jet2":
        e = np.exp(self.value)
        return self._compose(e, e, e)

    def log(self) -> "Jet2":
        x = self.value
        if x <= 0.0:
            raise DomainError(f"log of non-positive argument {x:.6g}")
        inv = 1.0 / x
        return self._compose(np.log(x), inv, -inv * inv)

    def _compose(self, f0: float, f1: float, f2: float) -> "Jet2":
        """Chain rule for a scalar function with derivatives f1, f2 at self.value."""
        gradient = f1 * self.gradient
        hessian = None
        if self.hessian is not None:
            hessian = f1 * self.hessian + f2 * np.outer(self.gradient, self.gradient)
        return Jet2(f0, gradient, hessian)
