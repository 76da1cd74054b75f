import numpy as np
import pytest
import torch

from cisunet.config import ModelConfig


def micro_config(**overrides) -> ModelConfig:
    """Smallest network that still exercises every stage."""
    kw = dict(stage_channels=(4, 8, 16, 32), stage_depths=(1, 1, 1, 1), embed_dim=8,
              window_size=2, shift_size=1, num_heads=2, num_classes=3)
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture
def micro_cfg():
    return micro_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[tuple[int, str], str] = {}


def record_criterion(number: int, passed: bool, detail: str, tag: str = "") -> None:
    line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[(number, tag)] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
