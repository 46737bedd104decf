"""With-replacement bootstrap with calibration: replication weights and bootstrap
critical values for EL ratio statistics.

The scheme is meant for single-stage designs with small sampling fractions.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .datamodel import DesignSample
from .elcore import DEFAULT_CONFIG, ELKind, ELProblem, RFunction, SolverConfig
from .estfn import EstimatingFunction, ParamSpace
from .exceptions import NumericalError, SingularGram, UnstableQuantile

log = logging.getLogger(__name__)

SINGLE_STAGE_CAVEAT = (
    "bootstrap calibration assumes a single-stage design with a small sampling fraction"
)
MIN_FINITE = 20
_MAX_REDRAWS = 10


class NegativeWeightsWarning(UserWarning):
    """Chi-square calibration produced nonpositive weights (kept as they are)."""


def calibrate_chisq(d, X, T) -> np.ndarray:
    """Chi-square-distance calibration ``w_i = d_i (1 + x_i' lambda)``.

    ``lambda = (sum d x x')^{-1} (T - sum d x)`` so that ``sum w x = T``.
    """
    d = np.asarray(d, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    T = np.atleast_1d(np.asarray(T, dtype=float))
    if X.shape[1] == 0:
        return d.copy()
    gram = (X * d[:, None]).T @ X
    if np.linalg.cond(gram) > 1e12:
        raise SingularGram("calibration Gram matrix is singular")
    lam = np.linalg.solve(gram, T - d @ X)
    w = d * (1.0 + X @ lam)
    if np.any(w <= 0):
        warnings.warn(f"{int(np.sum(w <= 0))} calibrated weight(s) are nonpositive",
                      NegativeWeightsWarning, stacklevel=2)
    return w


@dataclass(frozen=True)
class CalibrationSpec:
    """Columns of ``x`` to calibrate on and the totals to hit."""

    calib_columns: tuple[int, ...]
    totals: np.ndarray

    def __post_init__(self) -> None:
        cols = tuple(int(c) for c in self.calib_columns)
        t = np.atleast_1d(np.asarray(self.totals, dtype=float))
        if t.size != len(cols):
            raise ValueError("one total per calibration column is required")
        object.__setattr__(self, "calib_columns", cols)
        object.__setattr__(self, "totals", t)

    @classmethod
    def horvitz_thompson(cls, sample: DesignSample, calib_columns: Sequence[int]) -> "CalibrationSpec":
        cols = tuple(calib_columns)
        return cls(cols, sample.design_weights @ sample.x[:, list(cols)])

    @classmethod
    def none(cls) -> "CalibrationSpec":
        return cls((), np.zeros(0))

    def matrix(self, sample: DesignSample) -> np.ndarray:
        return sample.x[:, list(self.calib_columns)]


@dataclass(frozen=True)
class BootstrapDraw:
    counts: np.ndarray
    unit_weights: np.ndarray  # calibrated w*_i per selected copy
    boot_weights: np.ndarray  # h_i * w*_i


def _calibrate_columns(d, X, H, T):
    """Calibrate every column of the multiset count matrix ``H`` (n x B) at once."""
    n, B = H.shape
    if X.shape[1] == 0:
        return np.repeat(d[:, None], B, axis=1), np.zeros(B, dtype=bool)
    dX = X * d[:, None]
    gram = np.einsum("ib,ij,ik->bjk", H, dX, X)
    resid = T[None, :] - H.T @ dX
    cond = np.linalg.cond(gram)
    bad = ~(cond < 1e12)
    lam = np.zeros((B, X.shape[1]))
    if np.any(~bad):
        lam[~bad] = np.linalg.solve(gram[~bad], resid[~bad][..., None])[..., 0]
    wstar = d[:, None] * (1.0 + X @ lam.T)
    return wstar, bad


def _counts(n: int, seed: int, b: int, attempt: int = 0) -> np.ndarray:
    key = [seed, b] if attempt == 0 else [seed, b, attempt]
    return np.random.default_rng(key).multinomial(n, np.full(n, 1.0 / n)).astype(float)


def draw_bootstrap(sample: DesignSample, spec: CalibrationSpec, rng) -> BootstrapDraw:
    """One calibrated bootstrap multiset of size ``n``."""
    n = sample.n
    d, X = sample.design_weights, spec.matrix(sample)
    for _ in range(_MAX_REDRAWS):
        h = rng.multinomial(n, np.full(n, 1.0 / n)).astype(float)
        wstar, bad = _calibrate_columns(d, X, h[:, None], spec.totals)
        if not bad[0]:
            w = wstar[:, 0]
            return BootstrapDraw(h, w, h * w)
    raise SingularGram(f"bootstrap Gram matrix singular in {_MAX_REDRAWS} draws")


def bootstrap_draws(sample: DesignSample, spec: CalibrationSpec, B: int, seed: int):
    """Counts ``H`` and calibrated per-copy weights ``W*`` (both n x B).

    Replicate ``b`` uses its own stream ``(seed, b)``, so columns do not depend
    on ``B`` or on execution order (up to rounding in the batched solve).
    """
    if B < 1:
        raise ValueError("B must be at least 1")
    n = sample.n
    d, X = sample.design_weights, spec.matrix(sample)
    H = np.column_stack([_counts(n, seed, b) for b in range(B)])
    wstar, bad = _calibrate_columns(d, X, H, spec.totals)
    for b in np.flatnonzero(bad):
        for attempt in range(1, _MAX_REDRAWS + 1):
            h = _counts(n, seed, int(b), attempt)
            ws, bb = _calibrate_columns(d, X, h[:, None], spec.totals)
            if not bb[0]:
                H[:, b], wstar[:, b] = h, ws[:, 0]
                break
        else:
            raise SingularGram(f"replicate {b}: bootstrap Gram singular in {_MAX_REDRAWS} draws")
    if np.any((H > 0) & (wstar <= 0)):
        warnings.warn("some bootstrap calibration weights are nonpositive",
                      NegativeWeightsWarning, stacklevel=2)
    return H, wstar


def make_replication_weights(sample: DesignSample, spec: CalibrationSpec, B: int,
                             seed: int) -> np.ndarray:
    """Replication-weight matrix with columns ``h_i w*_i``."""
    H, wstar = bootstrap_draws(sample, spec, B, seed)
    return H * wstar


@dataclass(frozen=True)
class BootstrapCalibration:
    b_alpha: float
    lr_star: np.ndarray
    alpha: float

    @property
    def n_finite(self) -> int:
        return int(np.isfinite(self.lr_star).sum())

    def rejects(self, statistic: float) -> bool:
        return bool(statistic > self.b_alpha)


def upper_quantile(values: np.ndarray, alpha: float) -> float:
    """Order statistic ``ceil((1 - alpha) B)`` of the non-missing values."""
    v = np.sort(values[~np.isnan(values)])
    if np.isfinite(v).sum() < MIN_FINITE:
        raise UnstableQuantile(f"only {int(np.isfinite(v).sum())} finite bootstrap statistics")
    k = int(np.ceil((1.0 - alpha) * v.size))
    return float(v[max(k, 1) - 1])


def bootstrap_lr(kind, gf: EstimatingFunction, x, y, counts, unit_weights, theta_hat,
                 constraint: Optional[RFunction] = None, space: Optional[ParamSpace] = None,
                 cfg: SolverConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Bootstrap LR statistics, one per column of ``counts``/``unit_weights``.

    Simple form ``2{r*(theta*) - r*(theta_hat)}``; with a constraint the
    restriction is recentred at ``theta_hat`` and the nested statistic is used.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    if space is None:
        space = ParamSpace.unbounded(theta_hat.size, theta_hat)
    else:
        space = ParamSpace(space.lower, space.upper, space.clip(theta_hat))
    centred = constraint.recentered(theta_hat) if constraint is not None else None
    B = unit_weights.shape[1]
    out = np.full(B, np.nan)
    for b in range(B):
        prob = ELProblem(kind, gf, x, y, unit_weights[:, b],
                         counts=None if counts is None else counts[:, b], cfg=cfg)
        try:
            th_star, prof_star = prob.maximize(space)
            if centred is None:
                other = prob.log_ratio(theta_hat)
            else:
                _, prof_r = prob.maximize_restricted(centred, theta_hat=th_star, space=space)
                other = prof_r.log_ratio
        except NumericalError as exc:
            log.debug("bootstrap replicate %d failed: %s", b, exc)
            continue
        out[b] = max(2.0 * (prof_star.log_ratio - other), 0.0)
    return out


def bootstrap_critical_value(kind, gf: EstimatingFunction, x, y, theta_hat, alpha: float,
                             counts=None, unit_weights=None, rep_weights=None,
                             constraint: Optional[RFunction] = None,
                             space: Optional[ParamSpace] = None,
                             cfg: SolverConfig = DEFAULT_CONFIG) -> BootstrapCalibration:
    """Upper-``alpha`` bootstrap critical value.

    Pass either the multiset ``counts`` with per-copy ``unit_weights`` (from
    :func:`bootstrap_draws`), or prebuilt ``rep_weights`` columns.  The
    sample likelihood needs the counts; the pseudo likelihood can use
    replication columns directly.
    """
    kind = ELKind.parse(kind)
    if rep_weights is not None:
        if kind is ELKind.SEL:
            raise ValueError("the sample EL bootstrap needs resampling counts, not only "
                             "replication columns; supply the design sidecar")
        unit_weights, counts = np.asarray(rep_weights, dtype=float), None
    elif counts is None or unit_weights is None:
        raise ValueError("supply counts and unit_weights, or rep_weights")
    lr = bootstrap_lr(kind, gf, x, y, counts, unit_weights, theta_hat, constraint, space, cfg)
    return BootstrapCalibration(upper_quantile(lr, alpha), lr, alpha)
