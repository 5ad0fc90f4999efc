import numpy as np
import pytest

from robust_sfda import nncore as nn
from robust_sfda.config import ExperimentConfig

ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} :: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return nn.Model.init([5, 7, 4], 3, "tanh", seed=3)


@pytest.fixture
def tiny_config(tmp_path):
    """A config that runs the whole pipeline in well under a second."""
    return ExperimentConfig(
        classes=3,
        dim=4,
        samples_per_class=30,
        radius=2.0,
        noise_sigma=0.4,
        weak_strength=0.1,
        weak_noise_sigma=0.2,
        rotation=0.3,
        hidden=[8],
        bottleneck=4,
        source_epochs=3,
        adapt_epochs=2,
        attack_steps=3,
        eval_steps=3,
        epsilon=0.1,
        output_dir=str(tmp_path / "run"),
    )
