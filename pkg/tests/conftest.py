import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from geotr import _backend
from geotr.cloud import RigidTransform

settings.register_profile(
    "geotr", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("geotr")


@pytest.fixture(params=_backend.available())
def backend(request):
    """Run the test once per importable kernel backend."""
    previous = _backend.use(request.param)
    yield request.param
    _backend.use(previous)


def random_transform(rng, max_translation=1.0):
    axis = rng.normal(size=3)
    return RigidTransform.from_axis_angle(axis, rng.uniform(0, np.pi), rng.uniform(-max_translation, max_translation, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request, capsys):
    """``report(criterion, ok, detail)`` prints one PASS/FAIL line and fails the test when not ok."""

    def report(criterion, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
        request.config.stash.setdefault(_ACCEPTANCE, []).append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
