"""Session fixtures: one trained model, assessor, and optimization runs
shared by module tests and the acceptance suite."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for `helpers`

import stegflow.channel as ch
from stegflow.codec import BitPlan
from stegflow.flow import FlowConfig, FlowModel, to_domain
from stegflow.latentopt import OptConfig, optimize_latent, train_assessor
from stegflow.training import TrainConfig, synth_dataset, train

_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def dataset16():
    return synth_dataset(seed=7, n=384, dims=(16, 16), eval_fraction=1 / 6)


@pytest.fixture(scope="session")
def flow16(dataset16):
    model = FlowModel(FlowConfig(height=16, width=16, levels=3, steps=4), init_seed=0)
    train(model, dataset16, TrainConfig(epochs=30, batch_size=32, seed=0,
                                        checkpoint_interval=100))
    return model


@pytest.fixture(scope="session")
def gen_images16(flow16):
    rng = np.random.default_rng(1234)
    return np.stack([flow16.sample(rng, 0.7)[1] for _ in range(128)])


@pytest.fixture(scope="session")
def assessor16(flow16, dataset16, gen_images16):
    real = to_domain(dataset16.split("train")[:128])
    return train_assessor(real, gen_images16, seed=0)  # (assessor, holdout accuracy)


@pytest.fixture(scope="session")
def opt_runs(flow16, dataset16, assessor16):
    assessor, _ = assessor16
    eval_px = to_domain(dataset16.split("eval"))
    runs = []
    for seed in range(8):
        rng = np.random.default_rng(np.random.SeedSequence((99, seed)))
        idx = rng.choice(eval_px.shape[0], size=3, replace=False)
        runs.append(optimize_latent(flow16, assessor, eval_px[idx], OptConfig()))
    return runs


@pytest.fixture(scope="session")
def table32(flow16):
    """32 paired trials over the full plan ladder and both channels."""
    plans = [BitPlan(), BitPlan(use_sign=True), BitPlan(alpha=22, beta=22),
             BitPlan(alpha=14, beta=22), BitPlan(alpha=0, beta=22),
             BitPlan(use_sign=True, alpha=0, beta=22)]
    return ch.run_table(flow16, plans, ch.default_channels(), trials=32, seed=11)


@pytest.fixture(scope="session")
def null_pool(flow16):
    """2048 plain generated images for the zero-payload steganalysis check."""
    rng = np.random.default_rng(np.random.SeedSequence((777,)))
    return np.stack([flow16.sample(rng, 0.7)[1] for _ in range(2048)])
