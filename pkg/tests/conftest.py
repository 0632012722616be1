import sys

import pytest

from vesseltraj.data.synth import SynthConfig, synthesize
from vesseltraj.model import ModelConfig, TrajectoryModel
from vesseltraj.training import TrainConfig, train


@pytest.fixture(scope="session")
def small_lines():
    return synthesize(SynthConfig("lines", n=30, noise=200.0, seed=3, seq_in=6, seq_out=6))


@pytest.fixture(scope="session")
def trained_small(small_lines):
    """A briefly trained unlabeled model on short synthetic lines."""
    cfg = ModelConfig(hidden=8, rec_dropout=0.05, seq_in=6, seq_out=6)
    model = TrajectoryModel.init(cfg, 0)
    tc = TrainConfig(lr=3e-3, batch_size=32, max_epochs=25, patience=100, seed=0)
    train(model, small_lines["train"], small_lines["val"], tc)
    return model


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
