"""Randomized systematic PPS sampling, nonresponse, and scenario weighting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..bootstrap import CalibrationSpec, bootstrap_draws, calibrate_chisq
from ..datamodel import DesignSample, SurveyDataset
from ..exceptions import CertaintyUnit, EmptyRespondents
from .population import Population


def inclusion_probabilities(size: np.ndarray, n: int) -> np.ndarray:
    size = np.asarray(size, dtype=float)
    if np.any(size <= 0):
        raise ValueError("size measures must be positive")
    pi = n * size / size.sum()
    if pi.max() >= 1.0:
        raise CertaintyUnit(f"{int(np.sum(pi >= 1))} unit(s) would have inclusion probability >= 1")
    return pi


def pps_systematic_indices(size: np.ndarray, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Indices of a randomized systematic PPS sample and all inclusion probabilities."""
    pi = inclusion_probabilities(size, n)
    perm = rng.permutation(pi.size)
    cum = np.cumsum(pi[perm])
    cum *= n / cum[-1]
    points = rng.uniform() + np.arange(n)
    pos = np.searchsorted(cum, points, side="right")
    return perm[pos], pi


def pps_randomized_systematic(pop: Population, n: int, rng) -> DesignSample:
    idx, pi = pps_systematic_indices(pop.size, n, rng)
    return DesignSample(pop.y[idx], pop.x[idx], 1.0 / pi[idx], idx, pop.x_names)


def apply_nonresponse_ratio(sample: DesignSample, response_prob: float, rng) -> DesignSample:
    """Bernoulli response with ratio adjustment so the weight total is preserved."""
    if not 0 < response_prob <= 1:
        raise ValueError("response probability must lie in (0, 1]")
    if response_prob == 1:
        return sample
    keep = rng.uniform(size=sample.n) < response_prob
    if not keep.any():
        raise EmptyRespondents("no respondents")
    d = sample.design_weights
    d0 = d[keep] * (d.sum() / d[keep].sum())
    index = None if sample.index is None else sample.index[keep]
    return DesignSample(sample.y[keep], sample.x[keep], d0, index, sample.x_names)


@dataclass(frozen=True)
class SimulatedFile:
    """A public-use file plus the bootstrap multisets behind its replicate columns."""

    dataset: SurveyDataset
    sample: DesignSample
    counts: np.ndarray
    unit_weights: np.ndarray


def make_public_file(sample: DesignSample, calib_cols, totals, B: int, seed: int) -> SimulatedFile:
    """Calibrated final weights and bootstrap replication weights.

    Final weights hit the known population ``totals``; each replicate is
    calibrated to the Horvitz-Thompson totals of the sample.
    """
    X = sample.x[:, list(calib_cols)]
    w = calibrate_chisq(sample.design_weights, X, totals)
    spec = CalibrationSpec.horvitz_thompson(sample, calib_cols)
    H, wstar = bootstrap_draws(sample, spec, B, seed)
    y = sample.y if sample.y.ndim == 2 else sample.y[:, None]
    ds = SurveyDataset(y=y, x=sample.x, final_weights=w, rep_weights=H * wstar,
                       x_names=sample.x_names or (),
                       signed_replicates=bool(np.any(H * wstar < 0)))
    return SimulatedFile(ds, sample, H, wstar)
