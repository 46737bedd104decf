"""Lagrange-multiplier solver and profile / restricted maximisation for PEL and SEL.

Both likelihoods share one computational form.  With constraint rows ``u_i``
and outer weights ``omega_i`` (summing to one) the profile log ratio is

    r(theta) = -m * sum_i omega_i * log(1 + lambda' u_i)

where ``lambda`` solves ``sum_i omega_i u_i / (1 + lambda' u_i) = 0`` and ``m``
is the (multi)sample size.  The pseudo version uses ``u_i = g_i`` with the
normalised final weights as ``omega``; the sample version uses
``u_i = w_i g_i`` with ``omega_i = 1/n``.  A bootstrap multiset with counts
``h_i`` enters through ``omega``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import null_space

from .datamodel import SurveyDataset
from .estfn import EstimatingFunction, ParamSpace
from .exceptions import HullViolation, NoConvergence, RankDeficient

log = logging.getLogger(__name__)


class ELKind(str, enum.Enum):
    PEL = "pel"
    SEL = "sel"

    @classmethod
    def parse(cls, value) -> "ELKind":
        if isinstance(value, ELKind):
            return value
        return cls(str(value).lower())


@dataclass(frozen=True)
class SolverConfig:
    lambda_tol: float = 1e-10
    theta_tol: float = 1e-8
    max_inner: int = 100
    max_outer: int = 200

    def __post_init__(self) -> None:
        if min(self.lambda_tol, self.theta_tol, self.max_inner, self.max_outer) <= 0:
            raise ValueError("solver settings must be positive")


DEFAULT_CONFIG = SolverConfig()


@dataclass(frozen=True)
class ELProfile:
    """Solution of the inner problem at one parameter value."""

    theta: np.ndarray
    lam: np.ndarray
    p_hat: np.ndarray
    log_ratio: float
    converged: bool
    iters: int


@dataclass(frozen=True)
class RFunction:
    """A restriction ``R(theta) = 0`` with ``k`` rows and Jacobian ``Phi``.

    Affine restrictions carry ``matrix`` and ``offset`` so that
    ``R(theta) = matrix @ theta - offset``.
    """

    value: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    k: int
    matrix: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None

    @property
    def affine(self) -> bool:
        return self.matrix is not None

    @classmethod
    def linear(cls, matrix, offset=None) -> "RFunction":
        A = np.atleast_2d(np.asarray(matrix, dtype=float))
        c = np.zeros(A.shape[0]) if offset is None else np.atleast_1d(np.asarray(offset, dtype=float))
        if c.size != A.shape[0]:
            raise ValueError("offset length must match the number of restriction rows")
        return cls(lambda th: A @ th - c, lambda th: A, A.shape[0], A, c)

    @classmethod
    def fix(cls, indices, values, p: int) -> "RFunction":
        """Restrict ``theta[indices] = values``."""
        idx = np.atleast_1d(indices).astype(int)
        A = np.zeros((idx.size, p))
        A[np.arange(idx.size), idx] = 1.0
        return cls.linear(A, values)

    def recentered(self, theta_hat: np.ndarray) -> "RFunction":
        """``R(theta) - R(theta_hat)``, the version that holds at ``theta_hat``."""
        shift = np.asarray(self.value(theta_hat), dtype=float)
        if self.affine:
            return RFunction.linear(self.matrix, self.offset + shift)
        return RFunction(lambda th: self.value(th) - shift, self.jacobian, self.k)


def solve_lambda(kind, u, outer_w, tol: float = 1e-10, max_inner: int = 100):
    """Solve ``sum_i outer_w_i u_i / (1 + lambda'u_i) = 0`` for ``lambda``.

    ``kind`` only documents how ``u`` and ``outer_w`` were formed; the
    computation is identical for both likelihoods.

    Newton's method from ``lambda = 0`` with step halving that keeps
    ``1 + lambda'u_i > 1/n`` and never decreases the concave dual objective.
    Returns ``(lambda, converged)``; raises :class:`HullViolation` when the
    tolerance cannot be met.
    """
    ELKind.parse(kind)
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    w = np.asarray(outer_w, dtype=float).ravel()
    lam, _, _ = _newton_lambda(u, w, 1.0 / u.shape[0], tol, max_inner)
    return lam, True


def _newton_lambda(u, omega, floor, tol, max_inner):
    n, r = u.shape
    lam = np.zeros(r)
    t = np.ones(n)
    obj = 0.0
    target = tol * (1.0 + np.sqrt(np.max(np.einsum("ij,ij->i", u, u))))
    for it in range(max_inner + 1):
        c = omega / t
        grad = u.T @ c
        # sum(c) = 1 holds at any root; it fails when lambda runs off to
        # infinity along a direction where every 1 + lambda'u grows (0 outside the hull)
        if np.sqrt(grad @ grad) <= target and abs(c.sum() - 1.0) <= 1e-8:
            return lam, t, it
        if it == max_inner:
            break
        hess = (u * (c / t)[:, None]).T @ u
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        s = 1.0
        slack = 1e-14 * (1.0 + abs(obj))
        while True:
            lam_new = lam + s * step
            t_new = 1.0 + u @ lam_new
            if t_new.min() > floor:
                obj_new = omega @ np.log(t_new)
                if obj_new >= obj - slack:
                    break
            s *= 0.5
            if s < 1e-10:
                raise HullViolation("no feasible ascent step for the Lagrange multiplier")
        lam, t, obj = lam_new, t_new, obj_new
    raise HullViolation(f"multiplier did not converge in {max_inner} iterations")


class ELProblem:
    """Profile empirical likelihood for one data set, weight vector and family.

    Parameters
    ----------
    kind : ELKind
    gf : EstimatingFunction
    x, y : arrays
        Covariate and response blocks.
    weights : (n,) array
        Per-unit survey weights (final weights, or per-copy bootstrap weights).
    counts : (n,) array, optional
        Multiplicities of a with-replacement multiset; units with zero count
        are dropped.
    """

    def __init__(self, kind, gf: EstimatingFunction, x, y, weights, counts=None,
                 cfg: SolverConfig = DEFAULT_CONFIG):
        self.kind = ELKind.parse(kind)
        self.gf = gf
        self.cfg = cfg
        w = np.asarray(weights, dtype=float)
        h = np.ones_like(w) if counts is None else np.asarray(counts, dtype=float)
        keep = (h > 0) & (w != 0)
        self.m = float(h.sum())
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        self.x = x[keep] if x.ndim and x.shape[0] == w.size else x
        self.y = y[keep]
        self.w = w[keep]
        h = h[keep]
        if gf.check_data is not None:
            gf.check_data(self.x, self.y)
        if self.kind is ELKind.PEL:
            self.omega = h * self.w / np.sum(h * self.w)
            self.unit_scale = None
        else:
            self.omega = h / self.m
            self.unit_scale = self.w
        self.floor = 1.0 / self.m

    @classmethod
    def from_dataset(cls, kind, ds: SurveyDataset, gf: EstimatingFunction,
                     cfg: SolverConfig = DEFAULT_CONFIG) -> "ELProblem":
        return cls(kind, gf, ds.x, ds.y, ds.final_weights, cfg=cfg)

    # -- constraint rows -------------------------------------------------
    def rows(self, theta) -> np.ndarray:
        g = self.gf.value(self.x, self.y, theta)
        return g if self.unit_scale is None else g * self.unit_scale[:, None]

    def row_jacobian(self, theta) -> np.ndarray:
        dg = self.gf.jacobian(self.x, self.y, theta)
        return dg if self.unit_scale is None else dg * self.unit_scale[:, None, None]

    def weighted_ee(self, theta) -> np.ndarray:
        """``sum_i omega_i u_i(theta)``; zero exactly at the just-identified root."""
        return self.omega @ self.rows(theta)

    # -- profile ---------------------------------------------------------
    def profile(self, theta) -> ELProfile:
        theta = np.asarray(theta, dtype=float)
        u = self.rows(theta)
        try:
            lam, t, it = _newton_lambda(u, self.omega, self.floor,
                                        self.cfg.lambda_tol, self.cfg.max_inner)
        except HullViolation:
            return ELProfile(theta, np.full(u.shape[1], np.nan), np.full(u.shape[0], np.nan),
                             -np.inf, False, self.cfg.max_inner)
        p_hat = self.omega / t
        return ELProfile(theta, lam, p_hat, float(-self.m * (self.omega @ np.log(t))), True, it)

    def log_ratio(self, theta) -> float:
        return self.profile(theta).log_ratio

    def _derivatives(self, prof: ELProfile):
        """Envelope gradient of ``r`` and a Gauss-Newton curvature matrix."""
        theta = prof.theta
        u = self.rows(theta)
        du = self.row_jacobian(theta)
        t = 1.0 + u @ prof.lam
        c = self.omega / t
        # d r / d theta = -m sum_i omega_i (du_i)' lambda / t_i
        grad = -self.m * np.einsum("i,irp,r->p", c, du, prof.lam)
        J = np.einsum("i,irp->rp", c, du)
        S = (u * (c / t)[:, None]).T @ u
        try:
            SinvJ = np.linalg.solve(S, J)
        except np.linalg.LinAlgError:
            SinvJ = np.linalg.lstsq(S, J, rcond=None)[0]
        curv = self.m * (J.T @ SinvJ)
        return grad, 0.5 * (curv + curv.T)

    # -- maximisation ----------------------------------------------------
    def solve_ee(self, theta0, space: Optional[ParamSpace] = None) -> np.ndarray:
        """Damped Newton on the weighted estimating equations (``r = p``)."""
        self.gf.require_smooth()
        theta = np.asarray(theta0, dtype=float).copy()
        f = self.weighted_ee(theta)
        fn = np.linalg.norm(f)
        for _ in range(self.cfg.max_outer):
            J = np.einsum("i,irp->rp", self.omega, self.row_jacobian(theta))
            try:
                step = -np.linalg.solve(J, f)
            except np.linalg.LinAlgError:
                raise RankDeficient("Jacobian of the estimating equations is singular") from None
            s = 1.0
            while True:
                cand = theta + s * step
                if space is not None:
                    cand = space.clip(cand)
                f_new = self.weighted_ee(cand)
                fn_new = np.linalg.norm(f_new)
                if np.isfinite(fn_new) and (fn_new <= fn or s < 1e-8):
                    break
                s *= 0.5
            moved = np.linalg.norm(cand - theta)
            theta, f, fn = cand, f_new, fn_new
            if moved <= self.cfg.theta_tol * (1.0 + np.linalg.norm(theta)) * 1e-2 or fn == 0.0:
                return theta
        if fn <= 1e-8 * (1.0 + np.abs(self.rows(theta)).max()):
            return theta
        raise NoConvergence("estimating-equation Newton iterations did not converge")

    def step_root(self) -> np.ndarray:
        """Smallest step point with a nonnegative weighted sum (nonsmooth, ``p = 1``)."""
        if self.gf.step_points is None or self.gf.p != 1:
            raise ValueError(f"{self.gf.name}: no root-finding rule for this nonsmooth family")
        pts = self.gf.step_points(self.x, self.y)
        lo, hi = 0, pts.size - 1
        if self.weighted_ee(pts[hi : hi + 1])[0] < 0:
            return pts[hi : hi + 1].copy()
        while lo < hi:
            mid = (lo + hi) // 2
            if self.weighted_ee(pts[mid : mid + 1])[0] >= 0:
                hi = mid
            else:
                lo = mid + 1
        return pts[lo : lo + 1].copy()

    def ascend(self, phi0, to_theta=None, Z=None, penalty=None, space=None):
        """Maximise ``r(theta(phi)) + penalty(phi)`` by damped Gauss-Newton ascent.

        ``to_theta`` maps the free parameters to ``theta`` (affine, with
        Jacobian ``Z``).  ``penalty`` returns ``(value, gradient, curvature)``
        of a smooth concave term.  Points outside ``space`` or outside the EL
        support are rejected by the line search.

        Returns ``(phi, profile, converged)``.
        """
        self.gf.require_smooth()
        phi = np.asarray(phi0, dtype=float).copy()
        if to_theta is None:
            to_theta = lambda v: v
            Z = None

        def objective(v):
            th = to_theta(v)
            if space is not None and (np.any(th < space.lower) or np.any(th > space.upper)):
                return -np.inf, None
            prof = self.profile(th)
            val = prof.log_ratio
            if penalty is not None and np.isfinite(val):
                val += penalty(v)[0]
            return val, prof

        f, prof = objective(phi)
        if not np.isfinite(f):
            raise HullViolation("starting point lies outside the empirical likelihood support")
        def derivatives(v, prof):
            grad, curv = self._derivatives(prof)
            if Z is not None:
                grad, curv = Z.T @ grad, Z.T @ curv @ Z
            if penalty is not None:
                _, pg, pc = penalty(v)
                grad, curv = grad + pg, curv + pc
            return grad, curv

        def newton_curvature(v, grad):
            # minus the Hessian, by differencing the exact envelope gradient
            h = 1e-6 * (1.0 + np.abs(v))
            H = np.empty((v.size, v.size))
            for j in range(v.size):
                e = v.copy()
                e[j] += h[j]
                val, pr = objective(e)
                if not np.isfinite(val):
                    return None
                H[:, j] = (grad - derivatives(e, pr)[0]) / h[j]
            H = 0.5 * (H + H.T)
            return H if np.linalg.eigvalsh(H)[0] > 0 else None

        stalled = 0
        poor_model = False
        for _ in range(self.cfg.max_outer):
            grad, curv = derivatives(phi, prof)
            if grad.size == 0:
                return phi, prof, True
            if poor_model:
                curv = newton_curvature(phi, grad)
                if curv is None:
                    curv = derivatives(phi, prof)[1]
            try:
                d = np.linalg.solve(curv, grad)
            except np.linalg.LinAlgError:
                d = np.linalg.lstsq(curv, grad, rcond=None)[0]
            predicted = 0.5 * grad @ d
            if predicted <= 1e-13 * (1.0 + abs(f)):
                return phi, prof, True
            s = 1.0
            while s >= 1e-10:
                cand = phi + s * d
                f_new, prof_new = objective(cand)
                if f_new >= f - 1e-13 * (1.0 + abs(f)):
                    break
                s *= 0.5
            else:
                # no ascent along the Gauss-Newton direction
                return phi, prof, predicted <= 1e-8 * (1.0 + abs(f))
            poor_model = f_new - f < 0.25 * s * predicted
            step = cand - phi
            # far from the maximiser Gauss-Newton can zigzag with negligible gains
            stalled = stalled + 1 if f_new - f <= 1e-9 * (1.0 + abs(f)) else 0
            phi, f, prof = cand, f_new, prof_new
            if stalled >= 3 or np.linalg.norm(step) <= self.cfg.theta_tol * (1.0 + np.linalg.norm(phi)):
                return phi, prof, True
        raise NoConvergence(f"outer maximisation exceeded {self.cfg.max_outer} iterations")

    def maximize(self, space: Optional[ParamSpace] = None):
        """Unrestricted maximiser; returns ``(theta_hat, profile)``."""
        p = self.gf.p
        space = space or ParamSpace.unbounded(p)
        if not self.gf.smooth:
            if self.gf.r != p:
                raise ValueError("nonsmooth over-identified systems are not supported")
            theta = self.step_root()
            return theta, self.profile(theta)
        if self.gf.r == p:
            theta = self.solve_ee(space.initial, space)
            return theta, self.profile(theta)
        theta, prof, ok = self.ascend(space.initial, space=space)
        if not ok:
            raise NoConvergence("line search stalled away from a stationary point")
        return theta, prof

    def one_step_restricted_start(self, theta_hat, constraint: RFunction) -> np.ndarray:
        """Asymptotic approximation to the restricted maximiser.

        ``theta_hat - Sigma Phi'(Phi Sigma Phi')^{-1} R(theta_hat)`` with ``Sigma``
        the inverse Gauss-Newton curvature at ``theta_hat``.
        """
        prof = self.profile(theta_hat)
        _, curv = self._derivatives(prof)
        Phi = np.atleast_2d(constraint.jacobian(theta_hat))
        R = np.atleast_1d(constraint.value(theta_hat))
        Sigma = np.linalg.pinv(curv)
        M = Phi @ Sigma @ Phi.T
        return theta_hat - Sigma @ Phi.T @ np.linalg.solve(M, R)

    def maximize_restricted(self, constraint: RFunction, theta_hat=None,
                            space: Optional[ParamSpace] = None):
        """Maximise ``r`` subject to ``R(theta) = 0``; returns ``(theta_R, profile)``.

        The profile carries ``log_ratio = -inf`` when no point of the
        restricted set lies inside the EL support near the starting values.
        """
        p = self.gf.p
        space = space or ParamSpace.unbounded(p)
        if theta_hat is None:
            theta_hat, _ = self.maximize(space)
        theta_hat = np.asarray(theta_hat, dtype=float)
        if constraint.affine:
            return self._restricted_affine(constraint, theta_hat, space)
        return self._restricted_auglag(constraint, theta_hat, space)

    def _restricted_affine(self, constraint, theta_hat, space):
        A, c = constraint.matrix, constraint.offset
        if A.shape[1] != self.gf.p:
            raise ValueError("restriction matrix has the wrong number of columns")
        if np.linalg.matrix_rank(A) < A.shape[0]:
            raise RankDeficient("restriction Jacobian does not have full row rank")
        theta_p = np.linalg.lstsq(A, c, rcond=None)[0]
        Z = null_space(A)
        to_theta = lambda phi: theta_p + Z @ phi
        if Z.shape[1] == 0:
            return theta_p, self.profile(theta_p)
        starts = []
        if np.allclose(A @ theta_hat, c, rtol=0, atol=1e-12 * (1 + np.abs(c).max())):
            starts.append(Z.T @ (theta_hat - theta_p))
        else:
            try:
                starts.append(Z.T @ (self.one_step_restricted_start(theta_hat, constraint) - theta_p))
            except (np.linalg.LinAlgError, ValueError):
                pass
            starts.append(Z.T @ (theta_hat - theta_p))
        last = None
        for phi0 in starts:
            if not np.isfinite(self.log_ratio(to_theta(phi0))):
                last = to_theta(phi0)
                continue
            phi, prof, ok = self.ascend(phi0, to_theta, Z, space=space)
            if not ok:
                log.debug("restricted ascent stalled; returning best point found")
            return to_theta(phi), prof
        return last, self.profile(last)

    def _restricted_auglag(self, constraint, theta_hat, space, rho0=10.0, growth=10.0,
                           rounds=8, ctol=1e-8):
        try:
            theta = self.one_step_restricted_start(theta_hat, constraint)
            if not np.isfinite(self.log_ratio(theta)):
                theta = theta_hat.copy()
        except (np.linalg.LinAlgError, ValueError):
            theta = theta_hat.copy()
        mu = np.zeros(constraint.k)
        rho = rho0
        for _ in range(rounds):
            Phi0 = np.atleast_2d(constraint.jacobian(theta))
            if np.linalg.matrix_rank(Phi0) < constraint.k:
                raise RankDeficient("restriction Jacobian dropped rank at the iterate")

            def penalty(th, mu=mu, rho=rho):
                R = np.atleast_1d(constraint.value(th))
                Phi = np.atleast_2d(constraint.jacobian(th))
                val = -mu @ R - 0.5 * rho * R @ R
                grad = -Phi.T @ (mu + rho * R)
                return val, grad, rho * Phi.T @ Phi

            theta, prof, _ = self.ascend(theta, penalty=penalty, space=space)
            R = np.atleast_1d(constraint.value(theta))
            if np.linalg.norm(R) <= ctol:
                return theta, prof
            mu = mu + rho * R
            rho *= growth
        raise NoConvergence("augmented Lagrangian did not meet the restriction tolerance")


# -- dataset-level API ------------------------------------------------------

def profile(kind, ds: SurveyDataset, gf: EstimatingFunction, theta,
            cfg: SolverConfig = DEFAULT_CONFIG) -> ELProfile:
    return ELProblem.from_dataset(kind, ds, gf, cfg).profile(theta)


def maximize(kind, ds: SurveyDataset, gf: EstimatingFunction,
             space: Optional[ParamSpace] = None, cfg: SolverConfig = DEFAULT_CONFIG):
    return ELProblem.from_dataset(kind, ds, gf, cfg).maximize(space)


def maximize_restricted(kind, ds: SurveyDataset, gf: EstimatingFunction,
                        space: Optional[ParamSpace], constraint: RFunction,
                        cfg: SolverConfig = DEFAULT_CONFIG, theta_hat=None):
    return ELProblem.from_dataset(kind, ds, gf, cfg).maximize_restricted(
        constraint, theta_hat=theta_hat, space=space)
