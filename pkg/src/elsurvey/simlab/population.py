"""Finite populations for the simulation experiments."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class PopulationSpec:
    """Superpopulation settings.

    ``model="linear"``: ``y = x'theta + sigma*eps`` with ``x = (1, x1, x2, x3)``,
    ``x1 ~ Bernoulli(0.5)``, ``x2 ~ U(0,1)``, ``x3 = 0.5 + Exp(rate 2)`` and
    ``eps ~ N(0,1)``.  ``sigma_mode`` 1 and 2 give ``sigma = 1`` and ``3``;
    mode 3 sets ``sigma`` so that ``corr(y, x'theta) = rho``.

    ``model="quantile"``: ``y = 0.5 + x1 + x2 + chi2(3)`` with
    ``x2 ~ Exp(1)``; sampling sizes are ``0.5 + x2``.
    """

    N: int
    model: str = "linear"
    sigma_mode: int = 1
    theta: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    rho: float = 0.8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.model not in ("linear", "quantile"):
            raise ValueError(f"unknown population model {self.model!r}")
        if self.sigma_mode not in (1, 2, 3):
            raise ValueError("sigma_mode must be 1, 2 or 3")
        if self.N < 10:
            raise ValueError("population too small")


@dataclass(frozen=True)
class Population:
    y: np.ndarray
    x: np.ndarray
    size: np.ndarray
    calib_cols: tuple[int, ...]
    x_names: tuple[str, ...]
    theta_N: Optional[np.ndarray]
    sigma: float
    spec: PopulationSpec

    @property
    def N(self) -> int:
        return self.y.size

    @property
    def calib_totals(self) -> np.ndarray:
        return self.x[:, list(self.calib_cols)].sum(axis=0)

    def census_quantile(self, tau: float) -> float:
        """Smallest ``y`` with population CDF at least ``tau``."""
        ys = np.sort(self.y)
        k = int(np.ceil(tau * ys.size - 1e-9))
        return float(ys[max(k, 1) - 1])

    def shifted(self, shifts: Sequence[float]) -> "Population":
        """Population with ``y + x @ shifts`` (a change of regression coefficients)."""
        shifts = np.asarray(shifts, dtype=float)
        y = self.y + self.x @ shifts
        theta = None if self.theta_N is None else self.theta_N + shifts
        return Population(y, self.x, self.size, self.calib_cols, self.x_names, theta,
                          self.sigma, self.spec)


def census_regression(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Root of ``sum x (y - x'theta) = 0``; the system is linear so one Newton step is exact."""
    return np.linalg.solve(x.T @ x, x.T @ y)


def generate_population(spec: PopulationSpec) -> Population:
    cov_rng = np.random.default_rng([spec.seed, spec.N, 0])
    err_rng = np.random.default_rng([spec.seed, spec.N, 1])
    N = spec.N
    x1 = cov_rng.binomial(1, 0.5, N).astype(float)
    if spec.model == "quantile":
        x2 = cov_rng.exponential(1.0, N)
        y = 0.5 + x1 + x2 + err_rng.chisquare(3, N)
        x = np.column_stack([x1, x2])
        return Population(y, x, 0.5 + x2, (0, 1), ("x1", "x2"), None, float("nan"), spec)

    x2 = cov_rng.uniform(0.0, 1.0, N)
    x3 = 0.5 + cov_rng.exponential(0.5, N)
    x = np.column_stack([np.ones(N), x1, x2, x3])
    eta = x @ np.asarray(spec.theta, dtype=float)
    if spec.sigma_mode == 1:
        sigma = 1.0
    elif spec.sigma_mode == 2:
        sigma = 3.0
    else:
        sigma = float(np.sqrt(eta.var() * (1.0 / spec.rho**2 - 1.0)))
    y = eta + sigma * err_rng.standard_normal(N)
    return Population(y, x, x3, (1, 2), ("1", "x1", "x2", "x3"),
                      census_regression(x, y), sigma, spec)
