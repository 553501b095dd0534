import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from translator_lab import immersion as imm
from translator_lab.grassmann import Subspace

settings.register_profile("lab", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lab")


def grim_patch(nodes, half=1.2, V=(0.0, 1.0)):
    x = np.linspace(-half, half, nodes)
    return imm.GraphPatch((x,), -np.log(np.cos(x)), V)


def rotated_grim_patch(nodes, psi=math.pi / 6, half=1.2):
    """Grim reaper rotated about the x axis, graphed over x with V = (0, cos psi, sin psi)."""
    from translator_lab.solver import rotated_grim_reaper
    x = np.linspace(-half, half, nodes)
    return imm.GraphPatch((x,), rotated_grim_reaper(x, psi), (0.0, math.cos(psi), math.sin(psi)))


def solved_codim2(nodes=81):
    """Translator surface in R^4 with curved normal bundle, solved on [-0.5, 0.5]^2.

    The Dirichlet data is not compatible at the corners, so the solution is
    cropped to [-0.25, 0.25]^2 where it is smooth.
    """
    from translator_lab import solver as S
    axes = (np.linspace(-0.5, 0.5, nodes),) * 2
    data = S.BoundaryData.from_function(
        lambda x, y: np.stack([0.3 * x * y + 0.2 * x, 0.2 * (x * x - y * y)], -1), axes)
    res = S.solve_system(axes, data, (0.0, 0.0, 0.6, 0.8))
    return res.patch.crop([(-0.25, 0.25)] * 2)


def random_subspace(rng, n, m):
    a = rng.normal(size=(n + m, n))
    q, _ = np.linalg.qr(a)
    return Subspace(q.T)


@pytest.fixture(scope="session")
def grim801():
    return grim_patch(801)


@pytest.fixture(scope="session")
def grim1601():
    return grim_patch(1601)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
