"""EL ratio tests calibrated by weighted chi-square quadratic forms, Wald tests and
confidence intervals by test inversion."""

from __future__ import annotations

import enum
import functools
import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy import stats

from .datamodel import SurveyDataset
from .elcore import DEFAULT_CONFIG, ELKind, ELProblem, RFunction, SolverConfig
from .estfn import EstimatingFunction, ParamSpace
from .exceptions import DegenerateTest, RankDeficient, SingularComponent
from .varest import COND_LIMIT, FitResult, plugin_components, sandwich

DEFAULT_MC_SEED = 20161552
DEFAULT_MC_DRAWS = 100_000
EIGEN_REL_THRESHOLD = 1e-8
_CHUNK = 1 << 15
DEFAULT_ALPHAS = (0.01, 0.05, 0.10)


class CalibMethod(str, enum.Enum):
    EIGEN_MC = "eigmc"
    RS1 = "rs1"
    RS2 = "rs2"

    @classmethod
    def parse(cls, value) -> "CalibMethod":
        if isinstance(value, CalibMethod):
            return value
        return cls(str(value).lower())


@functools.lru_cache(maxsize=32)
def _squared_normals(seed: int, m: int, draws: int) -> np.ndarray:
    """``draws x m`` matrix of squared standard normals.

    Generated in fixed-size chunks, chunk ``c`` from its own stream
    ``(seed, m, c)``, so the values do not depend on how work is split.
    """
    out = np.empty((draws, m))
    for c, start in enumerate(range(0, draws, _CHUNK)):
        stop = min(start + _CHUNK, draws)
        rng = np.random.default_rng([seed, m, c])
        out[start:stop] = rng.standard_normal((stop - start, m)) ** 2
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class QuadraticFormDist:
    """Law of ``sum_j delta_j Z_j^2`` with a p-value method."""

    eigenvalues: np.ndarray
    method: CalibMethod = CalibMethod.EIGEN_MC
    mc_draws: int = DEFAULT_MC_DRAWS
    seed: int = DEFAULT_MC_SEED

    def __post_init__(self) -> None:
        d = np.atleast_1d(np.asarray(self.eigenvalues, dtype=float))
        if d.size == 0 or np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise ValueError("need at least one positive finite eigenvalue")
        object.__setattr__(self, "eigenvalues", np.sort(d)[::-1])
        object.__setattr__(self, "method", CalibMethod.parse(self.method))

    @classmethod
    def from_matrix(cls, delta: np.ndarray, method=CalibMethod.EIGEN_MC, **kw) -> "QuadraticFormDist":
        ev = np.linalg.eigvalsh(0.5 * (delta + delta.T))
        top = ev.max()
        if not top > 0:
            raise RankDeficient("quadratic-form matrix has no positive eigenvalue")
        return cls(ev[ev > EIGEN_REL_THRESHOLD * top], method, **kw)

    @property
    def m(self) -> int:
        return self.eigenvalues.size

    @property
    def rs(self) -> tuple[float, float]:
        """``(a, m)`` for RS1, ``(c, k*)`` for RS2 and for the eigen method."""
        d = self.eigenvalues
        if self.method is CalibMethod.RS1:
            return float(d.mean()), float(self.m)
        s1, s2 = d.sum(), (d * d).sum()
        return float(s2 / s1), float(s1 * s1 / s2)

    @functools.cached_property
    def _mc_sorted(self) -> np.ndarray:
        q = _squared_normals(self.seed, self.m, self.mc_draws) @ self.eigenvalues
        return np.sort(q)

    def pvalue(self, statistic: float) -> float:
        t = float(statistic)
        if np.isnan(t):
            return float("nan")
        if t <= 0:
            return 1.0
        if np.isinf(t):
            return 0.0
        if self.method is CalibMethod.EIGEN_MC:
            q = self._mc_sorted
            return float((q.size - np.searchsorted(q, t, side="right")) / q.size)
        if self.method is CalibMethod.RS1:
            a, m = self.rs
            return float(stats.chi2.sf(t / a, m))
        c, k = self.rs
        return float(stats.gamma.sf(t, k / 2.0, scale=2.0 * c))

    def critical_value(self, alpha: float) -> float:
        if not 0 < alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.method is CalibMethod.EIGEN_MC:
            q = self._mc_sorted
            return float(q[int(np.ceil((1 - alpha) * q.size)) - 1])
        if self.method is CalibMethod.RS1:
            a, m = self.rs
            return float(a * stats.chi2.isf(alpha, m))
        c, k = self.rs
        return float(stats.gamma.isf(alpha, k / 2.0, scale=2.0 * c))


def pvalue(dist: QuadraticFormDist, statistic: float) -> float:
    return dist.pvalue(statistic)


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    dist: object  # QuadraticFormDist, "NORMAL" or "BOOTSTRAP"
    reject_at: Mapping[float, bool]
    method: str
    theta_hat: Optional[np.ndarray] = None
    theta_restricted: Optional[np.ndarray] = None
    flags: tuple[str, ...] = ()
    extra: Mapping[str, object] = field(default_factory=dict)

    __test__ = False  # keep pytest from collecting this class

    def to_mapping(self) -> dict[str, str]:
        out = {
            "method": self.method,
            "statistic": f"{self.statistic:.10g}",
            "p_value": f"{self.p_value:.10g}",
        }
        for a, r in sorted(self.reject_at.items()):
            out[f"reject_{a:g}"] = str(bool(r)).lower()
        if isinstance(self.dist, QuadraticFormDist):
            out["eigenvalues"] = " ".join(f"{d:.10g}" for d in self.dist.eigenvalues)
            out["mc_draws"] = str(self.dist.mc_draws)
            out["mc_seed"] = str(self.dist.seed)
            if self.dist.method is not CalibMethod.EIGEN_MC:
                out["rs_scale"], out["rs_df"] = (f"{v:.10g}" for v in self.dist.rs)
        else:
            out["reference"] = str(self.dist)
        if self.theta_hat is not None:
            out["theta_hat"] = " ".join(f"{v:.10g}" for v in self.theta_hat)
        if self.theta_restricted is not None:
            out["theta_restricted"] = " ".join(f"{v:.10g}" for v in self.theta_restricted)
        for k, v in self.extra.items():
            out[k] = f"{v:.10g}" if isinstance(v, float) else str(v)
        if self.flags:
            out["flags"] = ",".join(self.flags)
        return out

    def to_keyvalue(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_mapping().items())

    def to_csv(self) -> str:
        row = self.to_mapping()
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)
        return buf.getvalue()


def _rejections(p: float, alphas=DEFAULT_ALPHAS) -> dict[float, bool]:
    return {a: bool(p < a) for a in alphas}


# -- statistics ---------------------------------------------------------------

def lr_simple(kind, ds: SurveyDataset, gf: EstimatingFunction, theta0,
              space: Optional[ParamSpace] = None, cfg: SolverConfig = DEFAULT_CONFIG,
              theta_hat=None) -> float:
    """``2{r(theta_hat) - r(theta0)}``; ``inf`` when ``theta0`` is outside the EL support."""
    prob = ELProblem.from_dataset(kind, ds, gf, cfg)
    if theta_hat is None:
        _, prof_hat = prob.maximize(space)
    else:
        prof_hat = prob.profile(theta_hat)
    r0 = prob.log_ratio(theta0)
    return float(max(2.0 * (prof_hat.log_ratio - r0), 0.0))


def _omega_root(Omega: np.ndarray) -> np.ndarray:
    ev, U = np.linalg.eigh(0.5 * (Omega + Omega.T))
    return (U * np.sqrt(np.clip(ev, 0.0, None))) @ U.T


def build_delta(kind, fit: FitResult, Phi: Optional[np.ndarray] = None,
                method=CalibMethod.EIGEN_MC, mc_draws: int = DEFAULT_MC_DRAWS,
                seed: int = DEFAULT_MC_SEED) -> QuadraticFormDist:
    """Quadratic-form law of the simple (``Phi=None``) or nested LR statistic."""
    G, W, Om = fit.Gamma_hat, fit.W_hat, fit.Omega_hat
    if G is None:
        raise ValueError("build_delta needs Gamma; use quantile_delta for nonsmooth families")
    if np.linalg.cond(W) > COND_LIMIT:
        raise SingularComponent("W matrix is numerically singular")
    WinvG = np.linalg.solve(W, G)
    Sigma = np.linalg.inv(G.T @ WinvG)
    if Phi is None:
        core = Sigma
    else:
        Phi = np.atleast_2d(np.asarray(Phi, dtype=float))
        if np.linalg.matrix_rank(Phi) < Phi.shape[0]:
            raise RankDeficient("restriction Jacobian is not of full row rank")
        SP = Sigma @ Phi.T
        core = SP @ np.linalg.solve(Phi @ SP, SP.T)
    root = _omega_root(Om)
    inner = WinvG @ core @ WinvG.T
    return QuadraticFormDist.from_matrix(root @ inner @ root, method,
                                         mc_draws=mc_draws, seed=seed)


def quantile_delta(fit: FitResult, method=CalibMethod.EIGEN_MC,
                   mc_draws: int = DEFAULT_MC_DRAWS, seed: int = DEFAULT_MC_SEED) -> QuadraticFormDist:
    """Scalar law ``(Omega/W) chi2(1)`` used for just-identified nonsmooth families."""
    if fit.W_hat.shape != (1, 1):
        raise ValueError("quantile_delta is defined for scalar estimating functions")
    return QuadraticFormDist([fit.Omega_hat[0, 0] / fit.W_hat[0, 0]], method,
                             mc_draws=mc_draws, seed=seed)


def simple_test(kind, ds: SurveyDataset, gf: EstimatingFunction, theta0,
                method=CalibMethod.EIGEN_MC, space: Optional[ParamSpace] = None,
                cfg: SolverConfig = DEFAULT_CONFIG, mc_draws: int = DEFAULT_MC_DRAWS,
                seed: int = DEFAULT_MC_SEED, alphas=DEFAULT_ALPHAS) -> TestResult:
    """Test ``theta = theta0`` on the full parameter vector."""
    kind = ELKind.parse(kind)
    prob = ELProblem.from_dataset(kind, ds, gf, cfg)
    theta_hat, prof_hat = prob.maximize(space)
    r0 = prob.log_ratio(np.asarray(theta0, dtype=float))
    stat = float(max(2.0 * (prof_hat.log_ratio - r0), 0.0))
    fit = plugin_components(kind, ds, gf, theta_hat)
    dist = (build_delta(kind, fit, None, method, mc_draws, seed) if gf.smooth
            else quantile_delta(fit, method, mc_draws, seed))
    p = dist.pvalue(stat)
    flags = ("outside_support",) if np.isinf(stat) else ()
    return TestResult(stat, p, dist, _rejections(p, alphas), dist.method.value,
                      theta_hat=theta_hat, flags=flags)


def lr_nested(kind, ds: SurveyDataset, gf: EstimatingFunction, constraint: RFunction,
              method=CalibMethod.EIGEN_MC, space: Optional[ParamSpace] = None,
              cfg: SolverConfig = DEFAULT_CONFIG, mc_draws: int = DEFAULT_MC_DRAWS,
              seed: int = DEFAULT_MC_SEED, alphas=DEFAULT_ALPHAS,
              fit: Optional[FitResult] = None, theta_hat=None) -> TestResult:
    """Test ``R(theta) = 0``; plug-ins are evaluated at the unrestricted maximiser."""
    kind = ELKind.parse(kind)
    prob = ELProblem.from_dataset(kind, ds, gf, cfg)
    if theta_hat is None:
        theta_hat, prof_hat = prob.maximize(space)
    else:
        theta_hat = np.asarray(theta_hat, dtype=float)
        prof_hat = prob.profile(theta_hat)
    theta_r, prof_r = prob.maximize_restricted(constraint, theta_hat=theta_hat, space=space)
    stat = float(max(2.0 * (prof_hat.log_ratio - prof_r.log_ratio), 0.0))
    if fit is None:
        fit = plugin_components(kind, ds, gf, theta_hat)
    dist = build_delta(kind, fit, constraint.jacobian(theta_hat), method, mc_draws, seed)
    p = dist.pvalue(stat)
    flags = ("outside_support",) if np.isinf(stat) else ()
    return TestResult(stat, p, dist, _rejections(p, alphas), dist.method.value,
                      theta_hat=theta_hat, theta_restricted=theta_r, flags=flags)


def wald_test(fit: FitResult, contrast, value0: float = 0.0,
              alphas=DEFAULT_ALPHAS) -> TestResult:
    """Two-sided normal test of ``c'theta = value0``."""
    if fit.V_hat is None:
        fit = sandwich(fit.kind, fit)
    c = np.asarray(contrast, dtype=float).ravel()
    est = float(c @ fit.theta_hat)
    se = float(np.sqrt(max(c @ fit.V_hat @ c, 0.0) / fit.n))
    if se == 0.0:
        raise DegenerateTest("contrast has zero standard error")
    z = (est - value0) / se
    p = float(2.0 * stats.norm.sf(abs(z)))
    return TestResult(z * z, p, "NORMAL", _rejections(p, alphas), "wald",
                      theta_hat=fit.theta_hat, extra={"z": z, "estimate": est, "se": se})


# -- confidence intervals -----------------------------------------------------

@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float
    estimate: float
    critical_value: float
    flags: tuple[str, ...] = ()

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def _bisect_boundary(f, inside: float, outside: float, crit: float, tol: float) -> float:
    """Boundary of ``{f <= crit}`` between an inside and an outside point."""
    while abs(outside - inside) > tol:
        mid = 0.5 * (inside + outside)
        if f(mid) <= crit:
            inside = mid
        else:
            outside = mid
    return 0.5 * (inside + outside)


def _smooth_interval(f, est: float, scale: float, crit: float, lo_lim=-np.inf, hi_lim=np.inf):
    tol = 1e-6 * (1.0 + abs(est))
    scale = max(scale, tol)
    ends, flags = [], []
    for sign, lim in ((-1.0, lo_lim), (1.0, hi_lim)):
        inside, h = est, scale
        for _ in range(60):
            cand = est + sign * h
            if (sign < 0 and cand <= lim) or (sign > 0 and cand >= lim):
                cand = lim
            val = f(cand)
            if val > crit:
                ends.append(_bisect_boundary(f, inside, cand, crit, tol))
                break
            if cand == lim:
                ends.append(lim)
                flags.append("unbounded_lower" if sign < 0 else "unbounded_upper")
                break
            inside, h = cand, 2.0 * h
        else:
            ends.append(est + sign * h)
            flags.append("unbounded_lower" if sign < 0 else "unbounded_upper")
    return ends[0], ends[1], tuple(flags)


def ci_invert(kind, ds: SurveyDataset, gf: EstimatingFunction, alpha: float = 0.05,
              method="eigmc", component: Optional[int] = None,
              space: Optional[ParamSpace] = None, cfg: SolverConfig = DEFAULT_CONFIG,
              critical_value: Optional[float] = None, mc_draws: int = DEFAULT_MC_DRAWS,
              seed: int = DEFAULT_MC_SEED) -> Interval:
    """Invert the EL ratio test for a scalar target.

    ``component`` selects one coordinate of a smooth ``p > 1`` parameter
    (profiled over the others).  ``method="boot"`` requires the bootstrap
    ``critical_value`` to be passed in; otherwise it overrides the
    quadratic-form quantile.
    """
    kind = ELKind.parse(kind)
    prob = ELProblem.from_dataset(kind, ds, gf, cfg)
    theta_hat, prof_hat = prob.maximize(space)
    need_dist = critical_value is None
    if str(method).lower() == "boot" and need_dist:
        raise ValueError("bootstrap intervals need a precomputed critical value")

    if not gf.smooth:
        fit = plugin_components(kind, ds, gf, theta_hat, need_omega=need_dist)
        crit = critical_value if not need_dist else quantile_delta(
            fit, method, mc_draws, seed).critical_value(alpha)
        return step_interval(prob, theta_hat[0], crit)

    fit = sandwich(kind, plugin_components(kind, ds, gf, theta_hat, need_omega=True))
    p = gf.p
    if p == 1:
        j = 0
        Phi = None
        f = lambda v: max(2.0 * (prof_hat.log_ratio - prob.log_ratio(np.array([v]))), 0.0)
    else:
        if component is None:
            raise ValueError("choose a component for a multi-parameter family")
        j = int(component)
        Phi = np.eye(p)[j : j + 1]

        def f(v):
            _, prof_r = prob.maximize_restricted(RFunction.fix([j], [v], p),
                                                 theta_hat=theta_hat, space=space)
            return max(2.0 * (prof_hat.log_ratio - prof_r.log_ratio), 0.0)

    crit = critical_value
    if crit is None:
        crit = build_delta(kind, fit, Phi, method, mc_draws, seed).critical_value(alpha)
    lo_lim = space.lower[j] if space is not None else -np.inf
    hi_lim = space.upper[j] if space is not None else np.inf
    lo, hi, flags = _smooth_interval(f, float(theta_hat[j]), 2.0 * float(fit.se[j]), crit,
                                     lo_lim, hi_lim)
    return Interval(lo, hi, float(theta_hat[j]), float(crit), flags)


def step_interval(prob: ELProblem, est: float, crit: float) -> Interval:
    """Search the sorted step points on each side of the estimate.

    The LR statistic for a nonsmooth family is ``-2 r(theta)`` and is
    nonincreasing toward the estimate from either side.
    """
    pts = prob.gf.step_points(prob.x, prob.y)
    k = int(np.searchsorted(pts, est))
    lr = lambda i: -2.0 * prob.log_ratio(pts[i : i + 1])
    flags = []
    # left: smallest index a <= k with lr(a) <= crit
    lo, hi = 0, k
    if lr(0) <= crit:
        hi = 0
        flags.append("unbounded_lower")
    while lo < hi:
        mid = (lo + hi) // 2
        if lr(mid) <= crit:
            hi = mid
        else:
            lo = mid + 1
    a = hi
    # right: largest index b >= k with lr(b) <= crit
    lo, hi = k, pts.size - 1
    if lr(hi) <= crit:
        lo = hi
        flags.append("unbounded_upper")
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if lr(mid) <= crit:
            lo = mid
        else:
            hi = mid - 1
    b = lo
    return Interval(float(pts[a]), float(pts[b]), float(est), float(crit), tuple(flags))


def woodruff_interval(ds: SurveyDataset, tau: float, alpha: float = 0.05) -> Interval:
    """Normal-theory quantile interval through the weighted CDF (Woodruff).

    The standard error of the estimated CDF at the point estimate comes from
    the replication weights.
    """
    ds.require_replicates()
    y = ds.y[:, 0]
    order = np.argsort(y, kind="stable")
    ys, ws = y[order], ds.final_weights[order]
    cdf = np.cumsum(ws) / ws.sum()
    est = ys[min(np.searchsorted(cdf, tau - 1e-12), ys.size - 1)]
    ind = (y <= est).astype(float)
    full = ds.final_weights @ ind / ds.n_hat
    reps = (ds.rep_weights.T @ ind) / ds.rep_weights.sum(axis=0)
    se = float(np.sqrt(np.mean((reps - full) ** 2)))
    z = stats.norm.isf(alpha / 2)

    def inverse(q):
        q = min(max(q, 0.0), 1.0)
        return ys[min(np.searchsorted(cdf, q - 1e-12), ys.size - 1)]

    return Interval(float(inverse(tau - z * se)), float(inverse(tau + z * se)), float(est), float(z))
