import numpy as np
import pytest
from hypothesis import settings

from keratitis_mtl.core.types import Case, DatasetManifest

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

COMBOS = ((1, 0, 0), (0, 1, 0), (1, 1, 0), (0, 0, 1), (1, 0, 1))


def make_case(i, labels=(1, 0, 0), payload=None, sex=0, age_bin=1, group=None, dim=4):
    if payload is None:
        payload = np.arange(dim, dtype=np.float64) + i
    b, f, a = labels
    return Case(f"c{i}", group or f"g{i}", payload, b, f, a, sex, age_bin)


def random_manifest(rng, n, dim=4, image=False):
    cases = []
    for i in range(n):
        combo = COMBOS[rng.integers(len(COMBOS))]
        payload = rng.random((5, 6, 3)) if image else rng.standard_normal(dim)
        cases.append(make_case(i, combo, payload, sex=int(rng.integers(2)),
                               age_bin=int(rng.integers(4))))
    return DatasetManifest(cases, {"source": "test"})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_manifest(rng):
    return random_manifest(rng, 40)


# Acceptance criteria record their outcome here; printed at session end.
ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, title, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
