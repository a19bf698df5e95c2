import numpy as np
import pytest

from gencbm.bottleneck import TrainConfig, init_model, train
from gencbm.dataset import build_dataset
from gencbm.renderer import DEFAULT_VOCAB, LatentSpec


@pytest.fixture(scope="session")
def spec():
    return LatentSpec()


@pytest.fixture(scope="session")
def small_dataset(spec):
    return build_dataset(7, spec, train=120, test=40)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    ds = small_dataset
    ids = ds.train_ids
    model = init_model(len(DEFAULT_VOCAB), seed=1, concept_names=DEFAULT_VOCAB.names)
    model, _ = train(model, ds.latents[ids], ds.concept_labels[ids], TrainConfig(epochs=400, seed=1))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
