import numpy as np
import pytest

from hha.hybrid_model import HybridSystemParams, simulate


def rotation(theta, scale):
    c, s = np.cos(theta), np.sin(theta)
    return scale * np.array([[c, -s], [s, c]])


def two_mode_truth(sharpness=20.0):
    """Two rotating systems split by the sign of the first state coordinate."""
    A = np.array([rotation(0.2, 0.95), rotation(-0.3, 0.9)])
    B = np.array([[[0.1], [0.0]], [[0.0], [0.1]]])
    b = np.array([[0.3, 0.0], [-0.3, 0.0]])
    Q = np.full((2, 2), 1e-3)
    W_x = np.array([[-sharpness, 0.0], [sharpness, 0.0]])
    return HybridSystemParams(A, B, b, Q, W_x, np.zeros((2, 1)), np.zeros(2))


@pytest.fixture(scope="session")
def two_mode_system():
    truth = two_mode_truth()
    rng = np.random.default_rng(0)
    u = rng.uniform(-1, 1, (5000, 1))
    traj = simulate(truth, np.zeros(2), u, seed=1)
    return truth, traj


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance verdict, print it and fail the test when it is negative."""

    def record(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
