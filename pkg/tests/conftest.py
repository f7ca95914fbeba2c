import numpy as np
import pytest

# acceptance verdicts collected by test_acceptance, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def textured(rng, shape, scale=2.0):
    """Band-limited random texture with unit std."""
    from scipy import ndimage

    raw = rng.standard_normal(shape)
    tex = ndimage.gaussian_filter(raw, scale * 0.5, mode="wrap") - ndimage.gaussian_filter(raw, scale * 2, mode="wrap")
    return tex / tex.std()
