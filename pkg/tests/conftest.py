"""
Pytest configuration: logging for every test.
"""
import logging

import pytest


@pytest.fixture(autouse=True)
def quiet_logging():
    """Keep per-iteration debug output out of failing-test reports."""
    logging.getLogger("app").setLevel(logging.INFO)
    yield
