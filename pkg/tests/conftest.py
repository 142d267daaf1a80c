import numpy as np
import pytest

from puyun.data import generate_synthetic
from puyun.grid import VariableSet, make_grid
from puyun.model import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    """Small synthetic dataset: 9x16 grid, 8 channels, 96 steps."""
    return generate_synthetic(make_grid(9, 16), VariableSet.desk(), 96, 11)


@pytest.fixture(scope="session")
def tiny_config(tiny_data):
    return ModelConfig(embed_dim=8, blocks_per_stage=(1, 1, 1, 1), kernel_K=5, patch=4,
                       variables=tiny_data.variables, grid=tiny_data.grid)


_VERDICTS = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion and return ``ok``."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append((n, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
