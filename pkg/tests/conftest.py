import numpy as np
import pytest

from querypatch import LabeledDataset, Rng, train_builtin

from synthdigits import make_digits


@pytest.fixture(scope="session")
def digits_small():
    """600 synthetic two-class digits; enough for fast oracle training."""
    images, labels = make_digits(600, seed=101)
    return LabeledDataset(images=images, labels=labels, num_classes=10)


@pytest.fixture(scope="session")
def digits_tiny():
    images, labels = make_digits(80, seed=202)
    return LabeledDataset(images=images, labels=labels, num_classes=10)


@pytest.fixture(scope="session")
def linear_model(digits_small):
    return train_builtin(digits_small, kind="linear", epochs=2, lr=0.1,
                         batch_size=32, rng=Rng(11))


@pytest.fixture(scope="session")
def mlp_model(digits_small):
    return train_builtin(digits_small, kind="mlp", hidden=(16,), epochs=2,
                         lr=0.1, batch_size=32, rng=Rng(12))


@pytest.fixture
def gen():
    """Plain numpy generator for fuzz loops."""
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    import accept_report

    if accept_report.LINES:
        terminalreporter.section("acceptance criteria")
        for line in accept_report.LINES:
            terminalreporter.write_line(line)
