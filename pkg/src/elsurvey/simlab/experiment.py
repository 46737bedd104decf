"""Monte Carlo drivers: size and power of EL ratio tests, and quantile intervals.

Power at an alternative is computed on the same samples as the size: a
population whose coefficient vector is shifted by ``s`` has response
``y + x's``, its census parameter moves by exactly ``s`` and its EL profile is
the base profile translated by ``s``.  Testing the null value ``v`` on the
shifted population is therefore the same as testing ``v - s`` on the base
population.  The null value is always the census parameter of the null
population, so size is measured against the finite-population truth.
"""

from __future__ import annotations

import csv
import logging
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import stats

from ..bootstrap import NegativeWeightsWarning, bootstrap_lr, upper_quantile
from ..datamodel import read_keyvalue
from ..elcore import ELProblem, RFunction
from ..eltest import CalibMethod, build_delta, quantile_delta, woodruff_interval, step_interval
from ..estfn import family_linear_regression, family_quantile
from ..exceptions import ELSurveyError
from ..varest import plugin_components, sandwich
from .population import PopulationSpec, generate_population
from .sampling import apply_nonresponse_ratio, make_public_file, pps_randomized_systematic

log = logging.getLogger(__name__)

TEST_METHODS = ("naive", "I", "II", "III", "IV", "V")
_CALIB = {"I": CalibMethod.EIGEN_MC, "II": CalibMethod.RS1, "III": CalibMethod.RS2}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())


@dataclass(frozen=True)
class ExperimentDescriptor:
    """One experiment: a test family or the quantile-interval study.

    ``test`` is ``"simple"`` (coefficient of ``x1`` equals its null value),
    ``"nested"`` (coefficients of ``x1`` and ``x2`` are equal) or
    ``"quantile"``.  ``cells`` holds ``b`` values, ``(b1, b2)`` pairs or
    quantile levels.
    """

    name: str
    test: str
    cells: tuple
    scenarios: tuple[str, ...] = ("A",)
    fraction: float = 0.02
    n: int = 400
    sigmas: tuple[int, ...] = (1, 2, 3)
    methods: tuple[str, ...] = ("I", "II", "III", "V")
    kinds: tuple[str, ...] = ("pel", "sel")
    runs: int = 500
    B: int = 500
    seed: int = 1
    mc_draws: int = 100_000
    alpha: float = 0.05
    response_prob: float = 0.7
    tables: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.test not in ("simple", "nested", "quantile"):
            raise ValueError(f"unknown test family {self.test!r}")
        bad = [m for m in self.methods if m not in TEST_METHODS + ("NA",)]
        if bad:
            raise ValueError(f"unknown method(s) {bad}")
        if not all(s in ("A", "B") for s in self.scenarios):
            raise ValueError("scenarios must be A or B")
        if self.runs < 1 or self.B < 1:
            raise ValueError("runs and B must be positive")

    @property
    def N(self) -> int:
        return int(round(self.n / self.fraction))

    @classmethod
    def from_mapping(cls, m: Mapping[str, str]) -> "ExperimentDescriptor":
        m = dict(m)
        test = m.pop("test")
        raw = m.pop("cells")
        if test == "nested":
            cells = tuple(tuple(float(v) for v in pair.split(":")) for pair in raw.split(","))
        else:
            cells = _floats(raw)
        tables = {}
        for k in list(m):
            if k.startswith("table_"):
                tables[k[len("table_"):]] = m.pop(k)
        kw = {"name": m.pop("name", "experiment"), "test": test, "cells": cells, "tables": tables}
        conv = {
            "scenarios": lambda s: tuple(t.strip().upper() for t in s.split(",")),
            "fraction": float, "n": int, "runs": int, "B": int, "seed": int,
            "mc_draws": int, "alpha": float, "response_prob": float,
            "sigmas": lambda s: tuple(int(float(t)) for t in s.split(",")),
            "methods": lambda s: tuple(t.strip() for t in s.split(",")),
            "kinds": lambda s: tuple(t.strip().lower() for t in s.split(",")),
        }
        for k, v in m.items():
            if k not in conv:
                raise ValueError(f"unknown descriptor key {k!r}")
            kw[k] = conv[k](v)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "ExperimentDescriptor":
        return cls.from_mapping(read_keyvalue(path))

    def to_mapping(self) -> dict[str, str]:
        if self.test == "nested":
            cells = ",".join(f"{a:g}:{b:g}" for a, b in self.cells)
        else:
            cells = ",".join(f"{c:g}" for c in self.cells)
        out = {
            "name": self.name, "test": self.test, "cells": cells,
            "scenarios": ",".join(self.scenarios), "fraction": f"{self.fraction:g}",
            "n": str(self.n), "sigmas": ",".join(map(str, self.sigmas)),
            "methods": ",".join(self.methods), "kinds": ",".join(self.kinds),
            "runs": str(self.runs), "B": str(self.B), "seed": str(self.seed),
            "mc_draws": str(self.mc_draws), "alpha": f"{self.alpha:g}",
            "response_prob": f"{self.response_prob:g}",
        }
        out.update({f"table_{k}": v for k, v in self.tables.items()})
        return out


@dataclass(frozen=True)
class ExperimentResult:
    descriptor: ExperimentDescriptor
    rows: tuple[dict, ...]
    elapsed: float

    def rate(self, scenario="A", sigma=None, method="I", kind="pel", cell=None, stat="rate"):
        for r in self.rows:
            if (r["scenario"] == scenario and r["method"] == method and r["kind"] == kind
                    and (sigma is None or r["sigma"] == sigma) and r["cell"] == cell):
                return r[stat]
        raise KeyError((scenario, sigma, method, kind, cell))

    def write_tables(self, out_dir) -> list[Path]:
        """Write one wide CSV per EL kind (plus a long-format file)."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        d = self.descriptor
        paths = []
        long_path = out_dir / f"{d.name}_long.csv"
        keys = list(self.rows[0]) if self.rows else []
        with open(long_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.rows)
        paths.append(long_path)
        groups = sorted({r["kind"] for r in self.rows}, key=lambda k: (k == "na", k))
        if d.test == "quantile":
            name = d.tables.get("all", d.name)
            path = out_dir / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["method", "tau", "LE", "CP", "UE", "AL", "runs_ok", "runs_failed"])
                for kind in groups:
                    for tau in d.cells:
                        r = next(r for r in self.rows if r["kind"] == kind and r["cell"] == tau)
                        w.writerow([kind.upper(), f"{tau:g}"] + [f"{r[s]:.3f}" for s in ("LE", "CP", "UE", "AL")]
                                   + [r["ok"], r["failed"]])
            return paths + [path]
        labels = [_cell_label(c) for c in d.cells]
        for kind in groups:
            name = d.tables.get(kind, f"{d.name}_{kind}")
            path = out_dir / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["scenario", "method", "sigma"] + labels + ["runs_ok", "runs_failed"])
                for sc in d.scenarios:
                    for m in d.methods:
                        for s in d.sigmas:
                            sel = [r for r in self.rows if r["kind"] == kind and r["scenario"] == sc
                                   and r["method"] == m and r["sigma"] == s]
                            if not sel:
                                continue
                            by_cell = {r["cell"]: r for r in sel}
                            w.writerow([sc, m, f"sigma{s}"]
                                       + [f"{by_cell[c]['rate']:.3f}" for c in d.cells]
                                       + [sel[0]["ok"], sel[0]["failed"]])
            paths.append(path)
        return paths


def _cell_label(c) -> str:
    if isinstance(c, tuple):
        return "(" + ",".join(f"{v:g}" for v in c) + ")"
    return f"{c:g}"


# -- one simulation run ---------------------------------------------------------

def _draw_file(pop, d: ExperimentDescriptor, scenario: str, rng):
    if scenario == "A":
        sample = pps_randomized_systematic(pop, d.n, rng)
    else:
        n0 = int(round(d.n / d.response_prob))
        sample = apply_nonresponse_ratio(pps_randomized_systematic(pop, n0, rng),
                                         d.response_prob, rng)
    with warnings.catch_warnings():
        # recorded on the dataset as signed_replicates
        warnings.simplefilter("ignore", NegativeWeightsWarning)
        return make_public_file(sample, pop.calib_cols, pop.calib_totals, d.B,
                                int(rng.integers(2**62)))


def _linear_cells(d: ExperimentDescriptor, pop):
    """Restriction rows and null values per cell, on the base population."""
    theta = pop.theta_N
    p = theta.size
    if d.test == "simple":
        row = np.eye(p)[1]
        return row, [theta[1] - (b - 1.0) for b in d.cells]
    row = np.zeros(p)
    row[1], row[2] = 1.0, -1.0
    base = theta[1] - theta[2]
    return row, [base - (b1 - b2) for b1, b2 in d.cells]


def _linear_run(d: ExperimentDescriptor, pop, scenario: str, rng):
    """Rejection indicators ``{(kind, method): array over cells}`` for one sample."""
    sim = _draw_file(pop, d, scenario, rng)
    ds = sim.dataset
    gf = family_linear_regression(pop.x.shape[1])
    row, nulls = _linear_cells(d, pop)
    out = {}
    for kind in d.kinds:
        try:
            prob = ELProblem.from_dataset(kind, ds, gf)
            theta_hat, prof_hat = prob.maximize()
            fit = sandwich(kind, plugin_components(kind, ds, gf, theta_hat))
            stats_ = np.empty(len(nulls))
            for j, v in enumerate(nulls):
                _, prof_r = prob.maximize_restricted(RFunction.linear(row[None, :], [v]),
                                                     theta_hat=theta_hat)
                stats_[j] = max(2.0 * (prof_hat.log_ratio - prof_r.log_ratio), 0.0)
            for m in d.methods:
                if m == "naive":
                    # plug-in statistic: nuisance held at the unrestricted estimate
                    naive = np.array([-2.0 * prob.log_ratio(theta_hat - row * (row @ theta_hat - v) / (row @ row))
                                      for v in nulls])
                    out[(kind, m)] = naive > stats.chi2.isf(d.alpha, 1)
                elif m in _CALIB:
                    dist = build_delta(kind, fit, row[None, :], _CALIB[m], d.mc_draws, d.seed)
                    out[(kind, m)] = stats_ > dist.critical_value(d.alpha)
                elif m == "IV":
                    lr = bootstrap_lr(kind, gf, ds.x, ds.y, sim.counts, sim.unit_weights,
                                      theta_hat, RFunction.linear(row[None, :], [row @ theta_hat]))
                    out[(kind, m)] = stats_ > upper_quantile(lr, d.alpha)
                elif m == "V":
                    se = float(np.sqrt(row @ fit.V_hat @ row / fit.n))
                    z = (row @ theta_hat - np.asarray(nulls)) / se
                    out[(kind, m)] = np.abs(z) > stats.norm.isf(d.alpha / 2)
        except ELSurveyError as exc:
            log.debug("run failed for %s: %s", kind, exc)
            for m in d.methods:
                out[(kind, m)] = None
    return out


def _quantile_run(d: ExperimentDescriptor, pop, scenario: str, rng):
    """Interval outcomes ``{(kind, tau): (lower, upper)}`` for one sample."""
    sim = _draw_file(pop, d, scenario, rng)
    ds = sim.dataset
    out = {}
    for tau in d.cells:
        gf = family_quantile(tau)
        for kind in d.kinds:
            try:
                prob = ELProblem.from_dataset(kind, ds, gf)
                theta_hat, _ = prob.maximize()
                fit = plugin_components(kind, ds, gf, theta_hat)
                crit = quantile_delta(fit, CalibMethod.EIGEN_MC, d.mc_draws, d.seed).critical_value(d.alpha)
                iv = step_interval(prob, float(theta_hat[0]), crit)
                out[(kind, tau)] = (iv.lower, iv.upper)
            except ELSurveyError as exc:
                log.debug("quantile run failed: %s", exc)
                out[(kind, tau)] = None
        if "NA" in d.methods:
            iv = woodruff_interval(ds, tau, d.alpha)
            out[("na", tau)] = (iv.lower, iv.upper)
    return out


def _chunk(args):
    d, scenario, sigma, runs = args
    pop = _population(d, sigma)
    res = []
    for k in runs:
        rng = np.random.default_rng([d.seed, ord(scenario), sigma, k])
        try:
            if d.test == "quantile":
                res.append(_quantile_run(d, pop, scenario, rng))
            else:
                res.append(_linear_run(d, pop, scenario, rng))
        except ELSurveyError as exc:
            log.debug("run %d failed before testing: %s", k, exc)
            res.append(None)
    return res


def _population(d: ExperimentDescriptor, sigma: int):
    model = "quantile" if d.test == "quantile" else "linear"
    return generate_population(PopulationSpec(d.N, model, sigma, seed=d.seed))


def run_experiment(d: ExperimentDescriptor, threads: int = 1) -> ExperimentResult:
    """Run every (scenario, sigma) cell; results depend only on the descriptor."""
    start = time.perf_counter()
    sigmas = (1,) if d.test == "quantile" else d.sigmas
    rows = []
    for scenario in d.scenarios:
        for sigma in sigmas:
            chunks = np.array_split(np.arange(d.runs), max(threads, 1) * 4 if threads > 1 else 1)
            tasks = [(d, scenario, sigma, list(c)) for c in chunks if len(c)]
            if threads > 1:
                with ProcessPoolExecutor(max_workers=threads) as pool:
                    results = [r for part in pool.map(_chunk, tasks) for r in part]
            else:
                results = [r for t in tasks for r in _chunk(t)]
            if d.test == "quantile":
                pop = _population(d, sigma)
                rows += _summarise_intervals(d, scenario, pop, results)
            else:
                rows += _summarise_rates(d, scenario, sigma, results)
    return ExperimentResult(d, tuple(rows), time.perf_counter() - start)


def _summarise_rates(d, scenario, sigma, results):
    rows = []
    for kind in d.kinds:
        for m in d.methods:
            vals = [r[(kind, m)] for r in results if r is not None and r.get((kind, m)) is not None]
            failed = len(results) - len(vals)
            rates = np.mean(vals, axis=0) if vals else np.full(len(d.cells), np.nan)
            for c, rate in zip(d.cells, rates):
                rows.append({"scenario": scenario, "sigma": sigma, "method": m, "kind": kind,
                             "cell": c, "rate": float(rate), "ok": len(vals), "failed": failed})
    return rows


def _summarise_intervals(d, scenario, pop, results):
    rows = []
    kinds = list(d.kinds) + (["na"] if "NA" in d.methods else [])
    for kind in kinds:
        for tau in d.cells:
            truth = pop.census_quantile(tau)
            ivs = [r[(kind, tau)] for r in results if r is not None and r.get((kind, tau)) is not None]
            failed = len(results) - len(ivs)
            if ivs:
                lo = np.array([a for a, _ in ivs])
                hi = np.array([b for _, b in ivs])
                le, ue = np.mean(truth <= lo), np.mean(truth >= hi)
                cp, al = np.mean((lo < truth) & (truth < hi)), np.mean(hi - lo)
            else:
                le = ue = cp = al = float("nan")
            rows.append({"scenario": scenario, "sigma": 1, "method": kind.upper(), "kind": kind,
                         "cell": tau, "LE": float(le), "CP": float(cp), "UE": float(ue),
                         "AL": float(al), "ok": len(ivs), "failed": failed})
    return rows
