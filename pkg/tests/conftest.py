import logging
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from casm.pipeline import fit_constraint_model  # noqa: E402
from casm.problems import toy_domain, toy_source  # noqa: E402


@pytest.fixture(autouse=True)
def _quiet_assumption_warnings(caplog):
    caplog.set_level(logging.ERROR, logger="casm")


@pytest.fixture(scope="session")
def toy_models():
    """Fitted toy constraint models for seeds 0..4, shared across tests."""
    cache = {}

    def get(seed):
        if seed not in cache:
            cache[seed] = fit_constraint_model(toy_source(), toy_domain(), seed=seed)
        return cache[seed]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
