import time

import hypothesis
import numpy as np
import pytest

from slothlab.config import ModelConfig
from slothlab.data import gen_synthetic, split
from slothlab.exitpolicy import calibrate
from slothlab.experiment import train_model
from slothlab.multiexit import build_convnet

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_net():
    """Untrained 4-exit convnet on 1x8x8 inputs; cheap enough for gradient checks."""
    return build_convnet((1, 8, 8), num_classes=4, widths=(3, 4, 5), hidden=6, seed=3)


@pytest.fixture(scope="session")
def desk_splits():
    return split(gen_synthetic(seed=0), 0.2, 0.1, seed=0)


@pytest.fixture(scope="session")
def desk_timing():
    return {}


@pytest.fixture(scope="session")
def desk_model(desk_splits, desk_timing):
    """The default desk model: trained once per session (about a minute)."""
    t0 = time.perf_counter()
    net = train_model(ModelConfig(), desk_splits["train"], seed=0)
    desk_timing["train"] = time.perf_counter() - t0
    return net


@pytest.fixture(scope="session")
def desk_policies(desk_model, desk_splits):
    hold = desk_splits["holdout"]
    return {rad: calibrate(desk_model, hold.X, hold.y, "confidence", rad) for rad in (0.05, 0.15)}


CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records an acceptance result for the end-of-run summary."""
    results = request.config.stash.setdefault(CRITERIA, {})

    def record(n, ok, detail):
        results[n] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
