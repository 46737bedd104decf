import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from elsurvey import SurveyDataset
from elsurvey.simlab import PopulationSpec, generate_population, make_public_file, pps_randomized_systematic

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def population():
    return generate_population(PopulationSpec(20_000, seed=1))


@pytest.fixture(scope="session")
def scenario_a(population):
    """A calibrated scenario-A file (n=400, B=200)."""
    rng = np.random.default_rng(12345)
    sample = pps_randomized_systematic(population, 400, rng)
    return make_public_file(sample, population.calib_cols, population.calib_totals, 200, 99)


@pytest.fixture()
def small_ds():
    rng = np.random.default_rng(0)
    n = 60
    x = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = x @ [1.0, 2.0] + rng.normal(size=n)
    w = rng.uniform(1, 4, size=n)
    rep = w[:, None] * rng.poisson(1.0, size=(n, 30))
    return SurveyDataset(y=y, x=x, final_weights=w, rep_weights=rep, x_names=("one", "x1"))


# acceptance criteria outcomes, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
