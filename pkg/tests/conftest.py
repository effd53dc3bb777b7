import numpy as np
import pytest

from fsseg.data import generate_synthetic_dataset, make_fold


@pytest.fixture(scope="session")
def synthetic():
    return generate_synthetic_dataset(num_classes=8, images=200, size=(64, 64), seed=1)


@pytest.fixture(scope="session")
def small_synthetic():
    return generate_synthetic_dataset(num_classes=8, images=48, size=(32, 32), seed=3)


@pytest.fixture
def fold0(synthetic):
    return make_fold(synthetic[2], 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict; the terminal summary prints them in order."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number, ok, detail=""):
        results[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
