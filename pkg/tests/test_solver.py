import math
import time

import numpy as np
import pytest
import sympy
from hypothesis import given, strategies as st

from translator_lab import immersion as imm
from translator_lab import solver as S


def grim_axes(nodes, half=1.2):
    return (np.linspace(-half, half, nodes),)


# -- configuration -----------------------------------------------------------

def test_config_defaults_and_validation():
    cfg = S.SolverConfig()
    assert (cfg.newton_tol, cfg.max_iter, cfg.damping, cfg.armijo, cfg.linear_solver_tol) == (
        1e-10, 50, 0.5, 1e-4, 1e-12)
    for bad in ({"damping": 1.0}, {"damping": 0.0}, {"newton_tol": 0.0}, {"max_iter": 0}):
        with pytest.raises(ValueError):
            S.SolverConfig(**bad)


def test_boundary_data_must_be_finite():
    vals = np.zeros(11)
    vals[0] = np.nan
    with pytest.raises(ValueError):
        S.BoundaryData(vals).on_grid((11,))
    # interior entries are ignored
    vals = np.zeros(11)
    vals[5] = np.inf
    assert S.BoundaryData(vals).on_grid((11,)).shape == (11, 1)


# -- codimension one ----------------------------------------------------------

def test_grim_reaper_recovery():
    axes = grim_axes(401)
    res = S.solve_codim1(axes, S.BoundaryData.from_function(S.grim_reaper_reference, axes))
    assert res.residual <= 1e-10
    assert np.abs(res.patch.u[..., 0] - S.grim_reaper_reference(axes[0])).max() <= 1e-4


def test_grim_reaper_solution_is_even():
    u = S.grim_reaper_problem().solve(201).patch.u[..., 0]
    assert np.abs(u - u[::-1]).max() <= 1e-12


def test_codim1_requires_vertical_V():
    axes = grim_axes(21)
    with pytest.raises(ValueError):
        S.solve_codim1(axes, S.BoundaryData(np.zeros(21)), V=(0.6, 0.8))


def test_bowl_on_square():
    res = S.bowl_problem().solve(101)
    exact = S.bowl_problem().exact_on(res.patch.axes)
    assert np.abs(res.patch.u - exact).max() <= 5e-3


def test_newton_residual_decreases():
    res = S.grim_reaper_problem().solve(401)
    hist = res.residual_history
    assert all(b < a for a, b in zip(hist, hist[1:]))


def test_non_convergence_is_reported():
    with pytest.raises(S.NonConvergenceError) as info:
        S.grim_reaper_problem().solve(401, S.SolverConfig(max_iter=2))
    assert len(info.value.residual_history) == 3
    assert info.value.residual_history[-1] > 1e-10


def test_height_has_no_interior_maximum():
    for problem in (S.grim_reaper_problem(), S.bowl_problem()):
        u = problem.solve(61).patch.u[..., 0]
        interior = np.zeros(u.shape, dtype=bool)
        interior[tuple(slice(1, -1) for _ in u.shape)] = True
        assert u[interior].max() <= u[~interior].max()


def test_geometric_residual_of_system_solution():
    res = S.grim_reaper_problem(formulation="system").solve(401)
    assert imm.translator_residual(res.patch).max_norm <= 10 * S.SolverConfig().newton_tol


def test_geometric_residual_of_flux_solution_is_second_order():
    errs = [imm.translator_residual(S.grim_reaper_problem().solve(k).patch).max_norm for k in (201, 401)]
    assert 0.15 <= errs[1] / errs[0] <= 0.45


# -- system form ---------------------------------------------------------------

def test_affine_solution_reproduced():
    # V tangent to the graph of u = c + b.x needs V_(n+1) = b . (V_1, V_2)
    V = (0.6, 0.0, 0.8)
    b = np.array([4.0 / 3.0, 0.5])
    axes = (np.linspace(0, 1, 21), np.linspace(-1, 1, 31))
    exact = lambda x, y: 0.3 + b[0] * x + b[1] * y
    res = S.solve_system(axes, S.BoundaryData.from_function(exact, axes), V)
    X, Y = np.meshgrid(*axes, indexing="ij")
    assert np.abs(res.patch.u[..., 0] - exact(X, Y)).max() <= 1e-12
    assert res.residual <= 1e-12


def test_rotated_grim_reaper():
    psi = math.pi / 6
    V = (0.0, math.cos(psi), math.sin(psi))
    axes = grim_axes(401)
    exact = S.rotated_grim_reaper(axes[0], psi)
    res = S.solve_system(axes, S.BoundaryData(exact), V)
    assert res.residual <= 1e-10
    assert np.abs(res.patch.u - exact).max() <= 1e-4


def test_system_rejects_non_unit_V():
    axes = grim_axes(21)
    with pytest.raises(ValueError):
        S.solve_system(axes, S.BoundaryData(np.zeros(21)), (0.0, 2.0))


def test_formulations_are_consistent_at_second_order():
    # the flux and non-divergence schemes differ by O(h^2); their Richardson
    # extrapolations agree much more closely
    def richardson(form):
        coarse = S.grim_reaper_problem(formulation=form).solve(201).patch.u[..., 0]
        fine = S.grim_reaper_problem(formulation=form).solve(401).patch.u[::2, 0]
        return (4 * fine - coarse) / 3
    gap_401 = np.abs(S.grim_reaper_problem().solve(401).patch.u
                     - S.grim_reaper_problem(formulation="system").solve(401).patch.u).max()
    gap_extrap = np.abs(richardson("codim1") - richardson("system")).max()
    assert gap_extrap <= 1e-3 * gap_401


# -- reference solutions -------------------------------------------------------

def test_grim_reaper_reference_values():
    assert S.grim_reaper_reference(0.0) == 0.0
    assert S.grim_reaper_reference(math.pi / 4) == pytest.approx(0.5 * math.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        S.grim_reaper_reference(math.pi / 2)


def test_grim_reaper_substitution():
    x = sympy.symbols("x")
    u = -sympy.log(sympy.cos(x))
    assert sympy.simplify(sympy.diff(u, x, 2) - 1 - sympy.diff(u, x) ** 2) == 0
    xs = np.linspace(-1.4, 1.4, 57)
    up, upp = np.tan(xs), 1 / np.cos(xs) ** 2
    assert np.abs(upp - 1 - up**2).max() <= 1e-12 * np.abs(upp).max()
    assert np.allclose(-np.log(np.cos(xs)), S.grim_reaper_reference(xs), atol=0, rtol=0)


def test_bowl_reference_values():
    assert S.bowl_reference(0.0, 2) == 0.0
    assert S.bowl_reference(0.0, 2, derivative=True) == 0.0
    assert S.bowl_reference(0.1, 2) == pytest.approx(0.0025, abs=5e-6)
    r = np.linspace(1e-3, 5.0, 400)
    assert np.all(S.bowl_reference(r, 3, derivative=True) > 0)
    with pytest.raises(ValueError):
        S.bowl_reference(0.5, 1)


@given(st.floats(0.05, 3.0), st.integers(2, 4))
def test_bowl_reference_satisfies_ode(r, n):
    step = 1e-4
    u1 = S.bowl_reference(np.array([r - step, r, r + step]), n, derivative=True)
    upp = (u1[2] - u1[0]) / (2 * step)
    up = u1[1]
    assert upp / (1 + up * up) + (n - 1) * up / r == pytest.approx(1.0, abs=1e-6)


# -- convergence -----------------------------------------------------------------

def test_convergence_grim_reaper():
    study = S.convergence_study(S.grim_reaper_problem(), (101, 201, 401))
    assert 1.8 <= study.order <= 2.2


def test_convergence_bowl():
    study = S.convergence_study(S.bowl_problem(), (21, 41, 81))
    assert 1.8 <= study.order <= 2.2


def test_convergence_affine_is_exact():
    problem = S.ReferenceProblem("affine", ((0.0, 1.0), (0.0, 1.0)), (0.6, 0.0, 0.8),
                                 lambda x, y: 0.3 + 4.0 / 3.0 * x + 0.5 * y, "system")
    study = S.convergence_study(problem, (11, 21, 41))
    assert study.exact and study.order is None
    assert max(study.errors) <= 1e-12


def test_grim_reaper_runtime():
    start = time.perf_counter()
    S.grim_reaper_problem().solve(401)
    assert time.perf_counter() - start <= 5.0
