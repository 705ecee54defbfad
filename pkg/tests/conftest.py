import numpy as np
import pytest

from gliomaseg.phantom import PhantomSpec


def small_spec(**kw) -> PhantomSpec:
    """32^3 phantom with geometry scaled down from the 64^3 default."""
    base = dict(
        dims=(32, 32, 32),
        brain_semi_axes=(13.5, 14.0, 12.0),
        wt_radius_range=(3.5, 6.5),
    )
    base.update(kw)
    return PhantomSpec(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def spec32():
    return small_spec()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
