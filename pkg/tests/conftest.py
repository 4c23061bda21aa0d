import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from harrisflow.corrfn import CorrelationFunction

# fixed example database-free profile: the same examples on every run
settings.register_profile(
    "ci",
    derandomize=True,
    deadline=None,
    max_examples=30,
    database=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

CI_SEEDS = (20240601, 7, 1234)


@pytest.fixture(scope="session")
def exp_half():
    return CorrelationFunction.exp_power(1.0, 0.5)


@pytest.fixture(scope="session")
def arratia():
    return CorrelationFunction.indicator()


def zscore(est, target):
    return abs(est.value - target) / est.stderr


def mean_se(x):
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(x.size))


# -- acceptance reporting -----------------------------------------------------------------

_CRITERIA: dict = {}


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line; returns the verdict for asserting."""

    def report(k, ok, detail):
        line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'} | {detail}"
        _CRITERIA.setdefault(k, []).append((ok, line))
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_CRITERIA):
        ok = all(v for v, _ in _CRITERIA[k])
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}")
        for _, line in _CRITERIA[k]:
            terminalreporter.write_line("    " + line)
