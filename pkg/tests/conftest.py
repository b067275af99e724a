import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from koopgas.config import load_pipeline_config, load_scenario
from koopgas.gas_dynamics import PipelineParams

settings.register_profile("ci", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("ci")


@pytest.fixture
def fig1():
    """The 30 km transient pipeline."""
    return PipelineParams(30000.0, 0.5, 0.0108, 340.0, 5.0, 20.0, 1e6, 8e6, "fig1")


@pytest.fixture(scope="session")
def fig1_config():
    return load_pipeline_config("fig1_pipeline.json")


@pytest.fixture(scope="session")
def desk7():
    return load_scenario("desk7_scenario.json")


@pytest.fixture(scope="session")
def desk7_study(tmp_path_factory, desk7):
    """Train every resolution and run the full global/local comparison once.

    Returns a dict with the model directory, output directory, runs keyed by
    label and the end-to-end wall time.
    """
    from koopgas.workflow import run_comparison, train_scenario_models

    root = tmp_path_factory.mktemp("desk7_models")
    out = tmp_path_factory.mktemp("desk7_tables")
    t0 = time.perf_counter()
    train_scenario_models(desk7, root, [m * 60.0 for m in desk7.resolutions])
    runs = run_comparison(desk7, root, out)
    elapsed = time.perf_counter() - t0
    return {"root": root, "out": out, "runs": {label: (sol, rep) for label, sol, rep in runs},
            "elapsed": elapsed}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(capsys):
    """Record and print one pass/fail line for an acceptance criterion."""

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
