from pathlib import Path

import pytest

from birefpairs.fibermodel import FiberGeometry
from birefpairs.modesolver import DispersionTable

DATA = Path(__file__).parent / "data"
FITTED = FiberGeometry(d=0.702, D=0.820, pitch=1.088)


@pytest.fixture(scope="session")
def fitted_tables():
    """Mode-solver scans of the fitted geometry: 64 samples over 0.40-3.6 um at 30 samples/um.

    Produced once by ``dispersion_scan`` and frozen; ``test_modesolver`` re-solves
    sample points to confirm they still match the solver.
    """
    return {p: DispersionTable.from_csv(DATA / f"fitted_{p}.csv") for p in ("x", "y")}


@pytest.fixture(scope="session")
def surrogate():
    from birefpairs.surrogate import Surrogate
    return Surrogate.load()


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, passed, detail)``; lines are printed in the terminal summary."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number, passed, detail):
        results[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
