import numpy as np
import pytest

from dpnkit.data import SyntheticSpec, gen_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_data():
    return gen_synthetic(SyntheticSpec(points_per_class=60, test_per_class=40, ood_points=90, seed=3))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, after the normal report."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance" not in rep.nodeid:
                continue
            detail = dict(rep.user_properties).get("criterion", rep.nodeid.split("::")[-1])
            lines.append((detail, "PASS" if rep.passed else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for detail, status in sorted(lines):
            terminalreporter.write_line(f"{status}  {detail}")
