import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def train_cache():
    """Trained federations keyed by config and seed, shared across modules so
    the default scenario is trained once per session."""
    return {}


@pytest.fixture(scope="session")
def default_seed0(train_cache):
    from fedunlearn.cli_runner import train_seed
    from fedunlearn.config import ExperimentConfig

    cfg = ExperimentConfig()
    return cfg, train_seed(cfg, 0, with_oracle=True, cache=train_cache)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES.append


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
