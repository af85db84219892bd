import numpy as np
import pytest

from mcadv import nn


def central_diff(f, x: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (all or selected flat coords)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


@pytest.fixture
def tiny_model():
    return nn.init_classifier([12, 9, 7, 4], [0.0, 0.3, 0.5], seed=3)


@pytest.fixture
def tiny_data():
    rng = np.random.default_rng(11)
    return rng.random((40, 12)), rng.integers(0, 4, 40)


@pytest.fixture(scope="session")
def small_digits():
    from mcadv.data import make_digits_standin

    return make_digits_standin(n_train=1500, n_test=400, seed=0)


@pytest.fixture(scope="session")
def small_classifier(small_digits):
    train, _ = small_digits
    cfg = nn.TrainConfig(epochs=8, batch_size=64, learning_rate=0.05, seed=0)
    return nn.train_classifier(train.images, train.labels, [784, 64, 10], [0.0, 0.5], cfg)


@pytest.fixture(scope="session")
def small_vae(small_digits):
    from mcadv.vae import train_vae

    train, _ = small_digits
    cfg = nn.TrainConfig(epochs=15, batch_size=64, learning_rate=1e-3, seed=0, optimizer="adam")
    return train_vae(train.images, cfg, hidden=128)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
