import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from meshalign import evalkit as ek

settings.register_profile(
    "meshalign",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("meshalign")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def textured64():
    return ek.textured_image(64, 64, 3)


@pytest.fixture(scope="session")
def synth_pairs():
    """Five rho=8 pairs on 128 px patches, shared by the aligner tests."""
    return [ek.synth_pair(ek.textured_image(160, 160, s), 8.0, 128, s) for s in range(5)]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
