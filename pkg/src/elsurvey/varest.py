"""Plug-in components and sandwich variances from final and replication weights.

The population size never appears: it is replaced by ``n_hat = sum(w)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .datamodel import SurveyDataset
from .elcore import ELKind
from .estfn import EstimatingFunction
from .exceptions import SingularComponent

COND_LIMIT = 1e12
FEW_REPLICATES = 50


@dataclass(frozen=True)
class FitResult:
    kind: ELKind
    theta_hat: np.ndarray
    W_hat: np.ndarray
    Gamma_hat: Optional[np.ndarray]
    Omega_hat: np.ndarray
    n: int
    V_hat: Optional[np.ndarray] = None
    se: Optional[np.ndarray] = None

    @property
    def Sigma_hat(self) -> np.ndarray:
        Winv_G = _solve_checked(self.W_hat, self.Gamma_hat)
        return np.linalg.inv(self.Gamma_hat.T @ Winv_G)


def _symmetric(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def _solve_checked(W: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if np.linalg.cond(W) > COND_LIMIT:
        raise SingularComponent("W matrix is numerically singular")
    return np.linalg.solve(W, rhs)


def rep_variance_total(ds: SurveyDataset, gf: EstimatingFunction, theta) -> np.ndarray:
    """Replication variance of the weighted total ``sum_i w_i g_i(theta)``."""
    ds.require_replicates()
    if ds.B < FEW_REPLICATES:
        warnings.warn(f"only {ds.B} replicate columns; variance estimates may be unstable",
                      stacklevel=2)
    g = gf.value(ds.x, ds.y, np.asarray(theta, dtype=float))
    dev = ds.rep_weights.T @ g - ds.final_weights @ g  # (B, r)
    return _symmetric(dev.T @ dev / ds.B)


def plugin_components(kind, ds: SurveyDataset, gf: EstimatingFunction, theta_hat,
                      need_omega: bool = True) -> FitResult:
    """``W``, ``Gamma`` and ``Omega`` at ``theta_hat``.

    ``Gamma`` is left as ``None`` for nonsmooth families.
    """
    kind = ELKind.parse(kind)
    theta_hat = np.asarray(theta_hat, dtype=float)
    w, n, n_hat = ds.final_weights, ds.n, ds.n_hat
    g = gf.value(ds.x, ds.y, theta_hat)
    if kind is ELKind.PEL:
        W = (g * w[:, None]).T @ g / n_hat
    else:
        W = n * (g * (w * w)[:, None]).T @ g / n_hat**2
    W = _symmetric(W)
    if np.linalg.cond(W) > COND_LIMIT:
        raise SingularComponent("W matrix is numerically singular")
    Gamma = None
    if gf.smooth:
        Gamma = np.einsum("i,irp->rp", w, gf.jacobian(ds.x, ds.y, theta_hat)) / n_hat
    if need_omega:
        Omega = n * rep_variance_total(ds, gf, theta_hat) / n_hat**2
    else:
        Omega = np.full_like(W, np.nan)
    return FitResult(kind, theta_hat, W, Gamma, Omega, n)


def sandwich(kind, fit: FitResult) -> FitResult:
    """Fill ``V_hat = Sigma Gamma' W^-1 Omega W^-1 Gamma Sigma`` and ``se``."""
    if fit.Gamma_hat is None:
        raise ValueError("sandwich variance needs a smooth estimating function")
    G, W, Om = fit.Gamma_hat, fit.W_hat, fit.Omega_hat
    Winv_G = _solve_checked(W, G)
    A = G.T @ Winv_G
    if np.linalg.cond(A) > COND_LIMIT:
        raise SingularComponent("Gamma' W^-1 Gamma is numerically singular")
    Sigma = np.linalg.inv(A)
    M = Sigma @ Winv_G.T
    V = _symmetric(M @ Om @ M.T)
    se = np.sqrt(np.clip(np.diag(V), 0.0, None) / fit.n)
    return replace(fit, V_hat=V, se=se)
