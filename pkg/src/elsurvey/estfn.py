"""Estimating-function families ``g(x, y, theta)`` with row-wise Jacobians.

Every evaluator is vectorised over records: ``value(x, y, theta)`` takes an
``(n, k)`` covariate block and an ``(n,)`` or ``(n, q)`` response block and
returns an ``(n, r)`` array; ``jacobian`` returns ``(n, r, p)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .exceptions import ValidationError

ValueFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _response(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 2:
        if y.shape[1] != 1:
            raise ValidationError(f"family expects one response column, got {y.shape[1]}")
        y = y[:, 0]
    return np.atleast_1d(y)


def _design(x: np.ndarray, p: int) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != p:
        raise ValidationError(f"expected {p} covariate columns, got {x.shape[1]}")
    return x


@dataclass(frozen=True)
class EstimatingFunction:
    """An estimating function of dimension ``r`` in a parameter of dimension ``p``.

    ``jacobian`` is ``None`` for nonsmooth families; those may provide
    ``step_points`` (the finite set of parameter values where ``g`` jumps).
    """

    name: str
    r: int
    p: int
    smooth: bool
    value: ValueFn
    jacobian: Optional[ValueFn] = None
    step_points: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    check_data: Optional[Callable[[np.ndarray, np.ndarray], None]] = None
    tau: Optional[float] = None

    def __post_init__(self) -> None:
        if not 1 <= self.p <= self.r:
            raise ValueError(f"need 1 <= p <= r, got p={self.p}, r={self.r}")
        if self.smooth and self.jacobian is None:
            raise ValueError("smooth families must supply a jacobian")

    def require_smooth(self) -> None:
        if not self.smooth:
            raise ValueError(f"{self.name}: operation needs a smooth estimating function")


@dataclass(frozen=True)
class ParamSpace:
    """Box bounds (possibly infinite) and a starting point."""

    lower: np.ndarray
    upper: np.ndarray
    initial: np.ndarray

    def __post_init__(self) -> None:
        lo, hi, x0 = (np.asarray(a, dtype=float).ravel() for a in (self.lower, self.upper, self.initial))
        if not (lo.size == hi.size == x0.size):
            raise ValueError("bounds and initial point differ in length")
        if np.any(lo > x0) or np.any(x0 > hi):
            raise ValueError("initial point lies outside the bounds")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "initial", x0)

    @classmethod
    def unbounded(cls, p: int, initial=None) -> "ParamSpace":
        x0 = np.zeros(p) if initial is None else np.asarray(initial, dtype=float)
        return cls(np.full(p, -np.inf), np.full(p, np.inf), x0)

    @property
    def p(self) -> int:
        return self.initial.size

    def clip(self, theta: np.ndarray) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)


def family_mean() -> EstimatingFunction:
    """``g = y - theta`` (the population mean)."""

    def value(x, y, theta):
        return (_response(y) - theta[0])[:, None]

    def jacobian(x, y, theta):
        return -np.ones((_response(y).size, 1, 1))

    return EstimatingFunction("mean", 1, 1, True, value, jacobian)


def family_linear_regression(p: int) -> EstimatingFunction:
    """``g = x (y - x'theta)``; include a column of ones in ``x`` for an intercept."""

    def value(x, y, theta):
        x = _design(x, p)
        return x * (_response(y) - x @ theta)[:, None]

    def jacobian(x, y, theta):
        x = _design(x, p)
        return -x[:, :, None] * x[:, None, :]

    return EstimatingFunction(f"linear({p})", p, p, True, value, jacobian)


def _check_binary(x, y):
    y = _response(y)
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("logistic family needs a 0/1 response")


def family_logistic_regression(p: int) -> EstimatingFunction:
    """``g = x {y - mu(x'theta)}`` with the logit link."""

    def value(x, y, theta):
        x = _design(x, p)
        mu = expit(x @ theta)
        return x * (_response(y) - mu)[:, None]

    def jacobian(x, y, theta):
        x = _design(x, p)
        mu = expit(x @ theta)
        return -(mu * (1.0 - mu))[:, None, None] * x[:, :, None] * x[:, None, :]

    return EstimatingFunction(f"logistic({p})", p, p, True, value, jacobian,
                              check_data=_check_binary)


def family_quantile(tau: float) -> EstimatingFunction:
    """``g = I(y <= theta) - tau``; nonsmooth, no Jacobian."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")

    def value(x, y, theta):
        return ((_response(y) <= theta[0]).astype(float) - tau)[:, None]

    def step_points(x, y):
        return np.unique(_response(y))

    return EstimatingFunction(f"quantile({tau:g})", 1, 1, False, value,
                              step_points=step_points, tau=tau)


def family_custom(r: int, p: int, value: ValueFn, jacobian: Optional[ValueFn] = None,
                  name: str = "custom") -> EstimatingFunction:
    """Wrap user closures; ``r > p`` gives an over-identified system."""
    return EstimatingFunction(name, r, p, jacobian is not None, value, jacobian)


def numerical_jacobian(gf: EstimatingFunction, x, y, theta, rel_step: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``gf.value``; shape ``(n, r, p)``."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for j in range(theta.size):
        h = rel_step * (1.0 + abs(theta[j]))
        up, dn = theta.copy(), theta.copy()
        up[j] += h
        dn[j] -= h
        cols.append((gf.value(x, y, up) - gf.value(x, y, dn)) / (2 * h))
    return np.stack(cols, axis=-1)
