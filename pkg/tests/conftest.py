import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from aspest.data import standardize, synth_gaussian_shift
from aspest.loop import source_train
from aspest.nn import TrainConfig

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_data():
    """Small shifted problem: 4 classes, 6 features, 300 target points."""
    tr, va, te = synth_gaussian_shift(n_classes=4, n_features=6, n_source=600, n_target=300,
                                      shift_magnitude=2.0, seed=3)
    (tr, va, te), _ = standardize(tr, [tr, va, te])
    return tr, va, te


@pytest.fixture(scope="session")
def tiny_source(tiny_data):
    tr, _, _ = tiny_data
    return source_train(tr.X, tr.y, tr.n_classes, hidden=(16, 8), epochs=10,
                        learning_rate=0.05, batch_size=64, seed=0, momentum=0.9)


@pytest.fixture
def fast_cfg():
    return TrainConfig(learning_rate=0.01, batch_size=32, min_epochs=2, max_epochs=4,
                       patience=1, momentum=0.9)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance report --------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Callable ``report(criterion, passed, detail)`` that prints and records one line."""
    def report(criterion, passed, detail=""):
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[passed]
        line = f"{status} criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
