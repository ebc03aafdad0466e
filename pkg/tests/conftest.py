import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from refine.model import ModelConfig, init_params

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(vocab_size=258, d_model=16, n_layers=2, d_fast=8, max_seq_len=128)


@pytest.fixture(scope="session")
def small_params(small_config):
    return init_params(small_config, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
