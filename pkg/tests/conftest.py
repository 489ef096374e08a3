import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def gaussian_run():
    """A CSSR-MAE model trained on the four-Gaussian preset, plus its statistics."""
    from cssr.data import gen_gaussian_2d
    from cssr.pipeline import build_stats
    from cssr.train import gaussian2d_preset, train

    data = gen_gaussian_2d(seed=0)
    cfg = gaussian2d_preset()
    model, history = train(cfg, data)
    stats = build_stats(model, data.x, cfg.augment, cfg.weights, cfg.gram_power)
    return {"data": data, "config": cfg, "model": model, "history": history, "stats": stats}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(capsys):
    """Call with (criterion id, passed, detail); prints one line and records it for the summary."""
    def record(cid: str, passed: bool, detail: str) -> bool:
        line = f"{cid:4s} {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n[acceptance] {line}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s[1:4].strip())):
            terminalreporter.write_line(line)
