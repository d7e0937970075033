import numpy as np
import pytest
from hypothesis import settings

from tfacm import ModelConfig, SeparatorConfig, init_weights
from tfacm.streaming import warm_up

settings.register_profile("tfacm", max_examples=40, deadline=None, derandomize=True)
settings.load_profile("tfacm")

ACCEPTANCE_LINES = []


def tiny_config(**sep):
    kw = dict(channels=4, blocks=2, hidden=4, heads=4, attn_channels=4)
    kw.update(sep)
    return ModelConfig(preset="custom", sep=SeparatorConfig(**kw))


@pytest.fixture(scope="session", autouse=True)
def _compiled():
    warm_up()


@pytest.fixture(scope="session")
def tiny_model():
    return init_weights(tiny_config(), 7)


@pytest.fixture(scope="session")
def tiny3_model():
    return init_weights(tiny_config(blocks=3), 11)


@pytest.fixture(scope="session")
def small_model():
    return init_weights("small", 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
