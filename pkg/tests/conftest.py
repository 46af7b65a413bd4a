"""Shared fixtures: a trained predictor and a synthetic recording, both built
through the command-line entry point with its default seeds."""

import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from headstage import cli

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def workdir(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("headstage")


@pytest.fixture(scope="session")
def trained(workdir):
    """Default ``headstage train`` run: model path plus its metrics document."""
    model = workdir / "model.aqm"
    metrics = workdir / "train_metrics.json"
    rc = cli.main(["train", "--set", f"model={json.dumps(str(model))}",
                   "--set", f"dataset={json.dumps(str(workdir / 'training.npz'))}",
                   "--set", f"metrics={json.dumps(str(metrics))}"])
    assert rc == 0
    return model, json.loads(metrics.read_text())


@pytest.fixture(scope="session")
def model(trained):
    from headstage.predictor import MlpModel

    return MlpModel.load(trained[0])


@pytest.fixture(scope="session")
def recording_dir(workdir) -> Path:
    out = workdir / "synthetic"
    assert cli.main(["synth", "--set", f"out_dir={json.dumps(str(out))}"]) == 0
    return out


@pytest.fixture(scope="session")
def recording(recording_dir):
    from headstage.synthetic import load_recording

    return load_recording(recording_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion.

    Usage: ``acceptance(number, title)`` returns a dict; put a short summary
    of the measured values in its ``detail`` entry.  The line is printed
    whether the test passes or fails.
    """
    state = {}

    def start(number, title):
        state.update(number=number, title=title, detail="")
        return state

    yield start
    if state:
        rep = getattr(request.node, "rep_call", None)
        ok = rep is not None and rep.passed
        line = f"criterion {state['number']:>2} {'PASS' if ok else 'FAIL'}  {state['title']}"
        if state["detail"]:
            line += f"  [{state['detail']}]"
        ACCEPTANCE_LINES.append((state["number"], line))
        print(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item.rep_call = rep


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
