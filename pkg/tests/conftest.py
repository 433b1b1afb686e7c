import numpy as np
import pytest

from varislip.solid_model import DeformationField, SolidGrid


def smooth_deformation(grid: SolidGrid, amp: float, rng) -> DeformationField:
    """Random admissible map: smooth displacement, then a rigid motion."""
    X = grid.reference_positions
    k = rng.integers(1, 3, size=4)
    c = rng.normal(size=4) * amp
    d = np.column_stack(
        [
            c[0] * np.sin(k[0] * np.pi * X[:, 0]) * np.sin(k[1] * np.pi * X[:, 1]),
            c[1] * np.sin(k[2] * np.pi * X[:, 0] + c[2]) * np.cos(k[3] * np.pi * X[:, 1]),
        ]
    )
    th = rng.uniform(0, 2 * np.pi)
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    return DeformationField(grid, (X + d) @ R.T + rng.normal(size=2))


def unit_directions(rng, n, count):
    """Random directions of unit l2 norm, shape (count, n, 2)."""
    D = rng.normal(size=(count, n, 2))
    return D / np.linalg.norm(D.reshape(count, -1), axis=1)[:, None, None]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number, passed, text):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} {text}"
        lines.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":").rstrip("ab"))):
            terminalreporter.write_line(line)
