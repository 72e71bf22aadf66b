import numpy as np
import pytest

from speq.config import ExperimentConfig
from speq.pipeline import load_task, pretrain, retrain


@pytest.fixture(scope="session")
def digits():
    cfg = ExperimentConfig(task="digits")
    train, test, _ = load_task(cfg)
    return train, test


@pytest.fixture(scope="session")
def small_cfg():
    return ExperimentConfig(task="digits", n_train=600, width=8, pretrain_epochs=4, epochs=3, batch_size=64)


@pytest.fixture(scope="session")
def fp_model(digits, small_cfg):
    train, test = digits
    model, _ = pretrain(small_cfg, 0, train.subset(600), test)
    return model


@pytest.fixture(scope="session")
def q_model(digits, small_cfg, fp_model):
    """cnn5 pretrained in float, then retrained at W2A2."""
    train, test = digits
    model, _ = retrain(small_cfg, 0, fp_model, train.subset(600), test)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = {}


@pytest.fixture
def report(capsys):
    """Print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def _report(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
        _ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
