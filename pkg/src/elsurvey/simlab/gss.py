"""A synthetic stand-in for a national social survey public-use file.

The replica has a binary response, an intercept column ``one`` and 14
covariates ``x1..x14``.  Only ``x8`` carries signal (log-odds ratio
``STRONG_COEF``); the rest have true coefficient zero.  Units are drawn by
randomized systematic PPS from a synthetic population, final weights and
every bootstrap replicate are rescaled to sum to ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from ..bootstrap import CalibrationSpec, bootstrap_draws
from ..datamodel import DesignSample, DesignSidecar, SurveyDataset, rescale_weights, save_dataset
from ..datamodel import write_keyvalue
from .sampling import pps_systematic_indices

N_RECORDS = 1552
N_COVARIATES = 14
STRONG = 8
STRONG_COEF = 1.258
INTERCEPT = -0.9
_BINARY = (1, 3, 5, 8, 10, 12, 14)


@dataclass(frozen=True)
class GSSReplica:
    dataset: SurveyDataset
    design_weights: np.ndarray
    theta: np.ndarray

    @property
    def x_names(self) -> tuple[str, ...]:
        return self.dataset.x_names


def gss_replica(seed: int = 2016, n: int = N_RECORDS, B: int = 500,
                fraction: float = 0.02) -> GSSReplica:
    """Draw the replica; identical output for identical arguments."""
    rng = np.random.default_rng([seed, n, 7])
    N = int(round(n / fraction))
    cols = []
    for j in range(1, N_COVARIATES + 1):
        if j in _BINARY:
            cols.append(rng.binomial(1, 0.3 + 0.02 * j, N).astype(float))
        else:
            cols.append(rng.standard_normal(N))
    x = np.column_stack([np.ones(N)] + cols)
    theta = np.zeros(N_COVARIATES + 1)
    theta[0], theta[STRONG] = INTERCEPT, STRONG_COEF
    y = (rng.uniform(size=N) < expit(x @ theta)).astype(float)
    size = 0.5 + rng.exponential(1.0, N)

    idx, pi = pps_systematic_indices(size, n, rng)
    names = ("one",) + tuple(f"x{j}" for j in range(1, N_COVARIATES + 1))
    sample = DesignSample(y[idx], x[idx], 1.0 / pi[idx], idx, names)
    H, wstar = bootstrap_draws(sample, CalibrationSpec.none(), B, seed)
    ds = SurveyDataset(y=sample.y, x=sample.x, final_weights=sample.design_weights,
                       rep_weights=H * wstar, y_names=("y",), x_names=names)
    return GSSReplica(rescale_weights(ds, float(n)), sample.design_weights, theta)


def write_gss_replica(out_dir, seed: int = 2016, B: int = 500, n: int = N_RECORDS) -> dict[str, Path]:
    """Write ``gss_replica.csv`` with its schema and design sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rep = gss_replica(seed=seed, n=n, B=B)
    paths = {"data": out_dir / "gss_replica.csv", "schema": out_dir / "gss_replica.schema",
             "design": out_dir / "gss_replica.design"}
    schema = save_dataset(rep.dataset, paths["data"], extra={"d": rep.design_weights})
    write_keyvalue(paths["schema"], schema.to_mapping())
    DesignSidecar("d").write(paths["design"])
    return paths
