import warnings

import numpy as np
import pytest

warnings.filterwarnings("ignore", message=".*TBB.*")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def jittered_lattice(side, jitter=0.2, seed=0, lo=0.0, hi=1.0):
    """Cell-centered lattice with uniform jitter of +-jitter * spacing."""
    h = (hi - lo) / side
    g = (np.stack(np.meshgrid(*[np.arange(side)] * 3, indexing="ij"), -1).reshape(-1, 3) + 0.5) * h + lo
    return g + np.random.default_rng(seed).uniform(-jitter, jitter, g.shape) * h


# criterion -> (ok, detail), filled by test_acceptance and echoed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
