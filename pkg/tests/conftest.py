import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest

from gprl.envs import MountainCar
from gprl.worldmodel import ModelConfig, build_world_model, collect_transitions


@pytest.fixture(scope="session")
def mc_data():
    """10,000 uniformly explored mountain car transitions."""
    return collect_transitions(MountainCar(), 10_000, np.random.default_rng(0))


@pytest.fixture(scope="session")
def mc_model(mc_data):
    """World model trained with library defaults; returns (model, reports, seconds)."""
    import time
    t0 = time.perf_counter()
    model, reports = build_world_model(mc_data, ModelConfig(seed=0))
    return model, reports, time.perf_counter() - t0


_ACCEPTANCE: list[str] = []


@pytest.fixture()
def verdict(capsys):
    """Record and immediately print one PASS/FAIL line for an acceptance criterion."""
    def emit(name: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line, flush=True)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
