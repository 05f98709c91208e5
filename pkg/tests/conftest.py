import hypothesis
import numpy as np
import pytest

from slabfill.phantoms import make_phantom

hypothesis.settings.register_profile("default", max_examples=30, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture(scope="session")
def small_phantom():
    return make_phantom(3, dims=(40, 32, 40))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)



ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
