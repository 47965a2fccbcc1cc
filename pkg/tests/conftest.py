import numpy as np
import pytest

from moco.grid import Deformation, Grid

# acceptance lines collected during the run, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def grid16():
    return Grid.box((16, 16))


def smooth_deformation(grid: Grid, rng, amp: float = 0.03, modes: int = 2) -> Deformation:
    """Random smooth displacement that vanishes on the boundary."""
    x = grid.nodes()
    lo = np.asarray(grid.origin).reshape((-1,) + (1,) * grid.ndim)
    hi = np.asarray(grid.upper).reshape((-1,) + (1,) * grid.ndim)
    s = (x - lo) / (hi - lo)  # in [0, 1]
    bump = np.prod(np.sin(np.pi * s), axis=0)
    disp = np.zeros_like(x)
    for c in range(grid.ndim):
        field = np.zeros(grid.node_shape)
        for _ in range(modes):
            k = rng.integers(1, 3, size=grid.ndim)
            phase = rng.uniform(0, 2 * np.pi, size=grid.ndim)
            field += np.prod([np.cos(np.pi * k[a] * s[a] + phase[a]) for a in range(grid.ndim)], axis=0)
        disp[c] = amp * bump * field / modes
    return Deformation(grid, x + disp)
