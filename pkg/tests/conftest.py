import numpy as np
import pytest
import torch

from tdcnet.dataio import GridGeometry, generate_synthetic_case

torch.set_default_dtype(torch.float64)


@pytest.fixture(scope="session")
def small_case():
    """A 6x6 synthetic case with T=16, short enough for fast training tests."""
    geometry = GridGeometry(7.0, 44.875, 0.125, 6, 6)
    return generate_synthetic_case(5, geometry, 130, T=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(RESULTS):
        terminalreporter.write_line(f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'}  [{detail}]")
