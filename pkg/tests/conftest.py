import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from imurn import designs
from imurn.rules import DiscreteAddingRule

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def random_diag_const():
    """Constant-rate design with a random diagonal adding rule."""
    rule = DiscreteAddingRule.bernoulli([0.5, 0.5], np.eye(2), np.zeros((2, 2)))
    return designs.build_const([2.0, 1.0], rule)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
