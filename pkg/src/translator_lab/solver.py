"""Dirichlet solvers for graphical translators and their reference solutions.

Two discretizations are provided:

* :func:`solve_codim1` - conservative flux form of
  ``div(Du / sqrt(1 + |Du|^2)) = 1 / sqrt(1 + |Du|^2)`` (V along the last axis),
  fluxes on half-grid points.
* :func:`solve_system` - non-divergence form of the general system
  ``g^ij u^a_ij = V_a - sum_i u^a_i V_i`` with central stencils.

Both use Newton's method with an analytic sparse Jacobian and a backtracking
line search on the max-norm of the residual.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.integrate import solve_ivp

from .immersion import GraphPatch

log = logging.getLogger(__name__)

ITERATIVE_THRESHOLD = 100_000


class NonConvergenceError(RuntimeError):
    def __init__(self, message, residual_history):
        super().__init__(message)
        self.residual_history = list(residual_history)


class SingularJacobianError(RuntimeError):
    def __init__(self, message, node):
        super().__init__(message)
        self.node = node


@dataclass(frozen=True)
class SolverConfig:
    newton_tol: float = 1e-10
    max_iter: int = 50
    damping: float = 0.5
    armijo: float = 1e-4
    linear_solver_tol: float = 1e-12

    def __post_init__(self):
        if min(self.newton_tol, self.linear_solver_tol, self.armijo) <= 0 or self.max_iter < 1:
            raise ValueError("tolerances and iteration limit must be positive")
        if not 0.0 < self.damping < 1.0:
            raise ValueError("damping must lie in (0, 1)")


@dataclass(frozen=True)
class BoundaryData:
    """Dirichlet values on the full grid, shape ``shape`` or ``(*shape, m)``.

    Only boundary entries are used; interior entries are ignored.
    """

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    @classmethod
    def from_function(cls, func: Callable, axes: Sequence) -> "BoundaryData":
        coords = np.meshgrid(*[np.asarray(a, dtype=float) for a in axes], indexing="ij")
        return cls(np.asarray(func(*coords), dtype=float))

    def on_grid(self, shape) -> np.ndarray:
        vals = self.values
        if vals.shape == tuple(shape):
            vals = vals[..., None]
        if vals.shape[:-1] != tuple(shape):
            raise ValueError(f"boundary data of shape {self.values.shape} does not fit grid {shape}")
        if not np.all(np.isfinite(vals[~_interior(shape)])):
            raise ValueError("boundary values must be finite")
        return vals


def _interior(shape):
    mask = np.zeros(shape, dtype=bool)
    mask[tuple(slice(1, s - 1) for s in shape)] = True
    return mask


@dataclass
class SolveResult:
    patch: GraphPatch
    residual_history: list = field(default_factory=list)
    iterations: int = 0
    formulation: str = ""

    @property
    def residual(self) -> float:
        return self.residual_history[-1]


# -- stencil bookkeeping -----------------------------------------------------

class _Grid:
    def __init__(self, axes):
        self.axes = tuple(np.asarray(a, dtype=float) for a in axes)
        self.shape = tuple(len(a) for a in self.axes)
        self.h = tuple(float(a[1] - a[0]) for a in self.axes)
        self.n = len(self.shape)
        self.size = int(np.prod(self.shape))
        self.index = np.arange(self.size).reshape(self.shape)
        self.interior = _interior(self.shape)

    def region(self, lo, hi, offset=None):
        """Slices of the box [lo, hi) shifted by ``offset``."""
        offset = offset or (0,) * self.n
        return tuple(slice(lo[k] + offset[k], self.shape[k] - hi[k] + offset[k]) for k in range(self.n))

    def unit(self, k, s=1):
        off = [0] * self.n
        off[k] = s
        return tuple(off)


def _add(*offs):
    return tuple(sum(c) for c in zip(*offs))


class _Assembler:
    def __init__(self, size):
        self.rows, self.cols, self.vals = [], [], []
        self.size = size

    def add(self, rows, cols, vals, mask=None):
        rows = np.ravel(rows)
        cols = np.ravel(cols)
        vals = np.broadcast_to(vals, np.shape(rows) if np.ndim(vals) == 0 else np.shape(vals)).ravel()
        if mask is not None:
            keep = np.ravel(mask)
            rows, cols, vals = rows[keep], cols[keep], vals[keep]
        self.rows.append(rows)
        self.cols.append(cols)
        self.vals.append(vals)

    def matrix(self):
        rows = np.concatenate(self.rows)
        cols = np.concatenate(self.cols)
        vals = np.concatenate(self.vals)
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.size, self.size))


# -- flux form (codimension one) ---------------------------------------------

def _codim1_terms(grid: _Grid, u: np.ndarray, jacobian: bool):
    """Residual of the flux form at every node and optionally its Jacobian."""
    n, h = grid.n, grid.h
    R = np.zeros(grid.shape)
    asm = _Assembler(grid.size) if jacobian else None
    interior = grid.interior
    for k in range(n):
        lo = [1] * n
        hi = [1] * n
        lo[k], hi[k] = 0, 1
        base = grid.region(lo, hi)
        ek = grid.unit(k)
        # stencil of each half-point derivative p_l: list of (offset, coefficient)
        stencils = []
        for l in range(n):
            if l == k:
                stencils.append([((0,) * n, -1.0 / h[k]), (ek, 1.0 / h[k])])
            else:
                el, eml = grid.unit(l), grid.unit(l, -1)
                c = 1.0 / (4.0 * h[l])
                stencils.append([(el, c), (eml, -c), (_add(ek, el), c), (_add(ek, eml), -c)])
        p = [sum(coef * u[grid.region(lo, hi, off)] for off, coef in st) for st in stencils]
        W2 = 1.0 + sum(q * q for q in p)
        W = np.sqrt(W2)
        flux = p[k] / W
        left = base
        right = grid.region(lo, hi, ek)
        R[left] += flux / h[k]
        R[right] -= flux / h[k]
        if jacobian:
            rows_l = grid.index[left]
            rows_r = grid.index[right]
            mask_l = interior[left]
            mask_r = interior[right]
            for l in range(n):
                dF = ((W2 if l == k else 0.0) - p[k] * p[l]) / (W2 * W)
                for off, coef in stencils[l]:
                    cols = grid.index[grid.region(lo, hi, off)]
                    asm.add(rows_l, cols, dF * coef / h[k], mask_l)
                    asm.add(rows_r, cols, -dF * coef / h[k], mask_r)
    # source term -1/W with central differences at the node
    inner = grid.region([1] * n, [1] * n)
    pc = []
    for l in range(n):
        pc.append((u[grid.region([1] * n, [1] * n, grid.unit(l))]
                   - u[grid.region([1] * n, [1] * n, grid.unit(l, -1))]) / (2.0 * h[l]))
    Wc2 = 1.0 + sum(q * q for q in pc)
    Wc = np.sqrt(Wc2)
    R[inner] -= 1.0 / Wc
    if jacobian:
        rows = grid.index[inner]
        for l in range(n):
            d = pc[l] / (Wc2 * Wc)
            c = 1.0 / (2.0 * h[l])
            asm.add(rows, grid.index[grid.region([1] * n, [1] * n, grid.unit(l))], d * c)
            asm.add(rows, grid.index[grid.region([1] * n, [1] * n, grid.unit(l, -1))], -d * c)
    return R, asm


def codim1_residual(axes, u) -> np.ndarray:
    """Discrete flux-form residual at every node (boundary entries are zero)."""
    grid = _Grid(axes)
    R, _ = _codim1_terms(grid, np.asarray(u, dtype=float).reshape(grid.shape), False)
    R[~grid.interior] = 0.0
    return R


# -- non-divergence system ---------------------------------------------------

def _system_terms(grid: _Grid, u: np.ndarray, V: np.ndarray, jacobian: bool):
    """Residual ``g^ij u^a_ij - V_a + sum_i u^a_i V_i`` on interior nodes.

    ``u`` has shape ``(*shape, m)``; unknowns are ordered component-major.
    """
    n, h = grid.n, grid.h
    m = u.shape[-1]
    inner = grid.region([1] * n, [1] * n)
    zero = (0,) * n

    def at(off):
        return u[grid.region([1] * n, [1] * n, off)]

    du = np.stack([(at(grid.unit(i)) - at(grid.unit(i, -1))) / (2 * h[i]) for i in range(n)], axis=-1)
    # du[..., a, i]
    hess = np.empty(du.shape[:-1] + (n, n))
    cross_stencil = {}
    for i in range(n):
        hess[..., i, i] = (at(grid.unit(i)) - 2 * at(zero) + at(grid.unit(i, -1))) / h[i] ** 2
        for j in range(i + 1, n):
            st = [(_add(grid.unit(i), grid.unit(j)), 1.0), (_add(grid.unit(i), grid.unit(j, -1)), -1.0),
                  (_add(grid.unit(i, -1), grid.unit(j)), -1.0), (_add(grid.unit(i, -1), grid.unit(j, -1)), 1.0)]
            cross_stencil[i, j] = st
            hess[..., i, j] = hess[..., j, i] = sum(c * at(off) for off, c in st) / (4 * h[i] * h[j])
    g = np.eye(n) + np.einsum("...ai,...aj->...ij", du, du)
    g_inv = np.linalg.inv(g)
    Vt, Vn = V[:n], V[n:]
    Rin = np.einsum("...ij,...aij->...a", g_inv, hess) - Vn + du @ Vt
    R = np.zeros(grid.shape + (m,))
    R[inner] = Rin
    if not jacobian:
        return R, None

    size = grid.size
    asm = _Assembler(size * m)
    rows_node = grid.index[inner]
    M = np.einsum("...ij,...ajk,...kl->...ail", g_inv, hess, g_inv)
    # d R^a / d u^b_k = -2 (M^a u^b)_k + delta_ab V_k
    dRdgrad = -2.0 * np.einsum("...akl,...bl->...abk", M, du)
    for a in range(m):
        dRdgrad[..., a, a, :] += Vt
    for a in range(m):
        rows = a * size + rows_node
        for b in range(m):
            for k in range(n):
                c = 1.0 / (2 * h[k])
                coef = dRdgrad[..., a, b, k]
                asm.add(rows, b * size + grid.index[grid.region([1] * n, [1] * n, grid.unit(k))], coef * c)
                asm.add(rows, b * size + grid.index[grid.region([1] * n, [1] * n, grid.unit(k, -1))], -coef * c)
        for i in range(n):
            gii = g_inv[..., i, i] / h[i] ** 2
            for off, c in ((grid.unit(i), 1.0), (zero, -2.0), (grid.unit(i, -1), 1.0)):
                asm.add(rows, a * size + grid.index[grid.region([1] * n, [1] * n, off)], gii * c)
            for j in range(i + 1, n):
                gij = 2.0 * g_inv[..., i, j] / (4 * h[i] * h[j])
                for off, c in cross_stencil[i, j]:
                    asm.add(rows, a * size + grid.index[grid.region([1] * n, [1] * n, off)], gij * c)
    return R, asm


def system_residual(axes, u, V) -> np.ndarray:
    grid = _Grid(axes)
    u = np.asarray(u, dtype=float).reshape(grid.shape + (-1,))
    R, _ = _system_terms(grid, u, np.asarray(V, dtype=float), False)
    return R


# -- Newton driver -----------------------------------------------------------

def _boundary_rows(grid: _Grid, asm: _Assembler, components: int):
    rows = grid.index[~grid.interior]
    for a in range(components):
        asm.add(a * grid.size + rows, a * grid.size + rows, 1.0)


def _direct_solve(J, rhs):
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            return spla.spsolve(J.tocsc(), rhs)
        except (spla.MatrixRankWarning, RuntimeError) as exc:
            log.debug("sparse solve failed: %s", exc)
            return np.full(rhs.shape, np.nan)


def _iterative_solve(J, rhs, config: SolverConfig):
    """ILU-preconditioned GMRES; None if it does not reach the tolerance."""
    try:
        ilu = spla.spilu(J.tocsc(), drop_tol=1e-5, fill_factor=20)
    except RuntimeError as exc:
        log.debug("incomplete factorization failed: %s", exc)
        return None
    precond = spla.LinearOperator(J.shape, matvec=ilu.solve)
    sol, info = spla.gmres(J, rhs, rtol=config.linear_solver_tol, atol=0.0, M=precond,
                           restart=100, maxiter=50)
    return sol if info == 0 else None


def _linear_solve(J, rhs, config: SolverConfig, grid: _Grid, components: int):
    sol = None
    if J.shape[0] > ITERATIVE_THRESHOLD:
        sol = _iterative_solve(J, rhs, config)
        if sol is None:
            log.info("iterative solve did not converge; falling back to a direct solve")
    if sol is None:
        sol = _direct_solve(J, rhs)
    bad = np.flatnonzero(~np.isfinite(sol))
    if bad.size:
        node = tuple(int(i) for i in np.unravel_index(int(bad[0]) % grid.size, grid.shape))
        raise SingularJacobianError(f"singular Jacobian at node {node}", node)
    return sol


def _newton(grid: _Grid, u0: np.ndarray, terms: Callable, config: SolverConfig):
    """Damped Newton on the stacked unknowns; ``terms(u, jac)`` returns (R, assembler)."""
    shape = u0.shape
    components = shape[-1]
    boundary = ~grid.interior

    def flat(R):
        return np.moveaxis(R, -1, 0).reshape(-1)

    u = u0.copy()
    R, _ = terms(u, False)
    R[boundary] = 0.0
    norm = float(np.abs(R).max())
    history = [norm]
    for it in range(1, config.max_iter + 1):
        if norm <= config.newton_tol:
            return u, history, it - 1
        _, asm = terms(u, True)
        _boundary_rows(grid, asm, components)
        J = asm.matrix()
        step = _linear_solve(J, -flat(R), config, grid, components)
        step = np.moveaxis(step.reshape((components,) + grid.shape), 0, -1)
        step[boundary] = 0.0
        alpha = 1.0
        while True:
            trial = u + alpha * step
            Rt, _ = terms(trial, False)
            Rt[boundary] = 0.0
            trial_norm = float(np.abs(Rt).max())
            if np.isfinite(trial_norm) and trial_norm <= (1.0 - config.armijo * alpha) * norm:
                break
            alpha *= config.damping
            if alpha < 1e-12:
                raise NonConvergenceError(
                    f"line search failed at iteration {it} (residual {norm:.3e})", history)
        u, R, norm = trial, Rt, trial_norm
        history.append(norm)
        log.debug("newton %d: residual %.3e (step %.3g)", it, norm, alpha)
    if norm <= config.newton_tol:
        return u, history, config.max_iter
    raise NonConvergenceError(
        f"no convergence after {config.max_iter} iterations (residual {norm:.3e})", history)


def harmonic_extension(axes, boundary: BoundaryData) -> np.ndarray:
    """Discrete harmonic function with the given boundary values."""
    grid = _Grid(axes)
    vals = boundary.on_grid(grid.shape)
    asm = _Assembler(grid.size)
    rows = grid.index[grid.interior]
    inner = grid.region([1] * grid.n, [1] * grid.n)
    diag = np.zeros(rows.shape)
    for k in range(grid.n):
        w = 1.0 / grid.h[k] ** 2
        diag = diag - 2.0 * w
        for s in (-1, 1):
            asm.add(rows, grid.index[grid.region([1] * grid.n, [1] * grid.n, grid.unit(k, s))], w)
    asm.add(rows, rows, diag)
    bnd = grid.index[~grid.interior]
    asm.add(bnd, bnd, 1.0)
    A = asm.matrix().tocsc()
    out = np.empty(vals.shape)
    lu = spla.splu(A)
    for a in range(vals.shape[-1]):
        rhs = np.where(grid.interior, 0.0, vals[..., a]).reshape(-1)
        out[..., a] = lu.solve(rhs).reshape(grid.shape)
    return out


def _prepare(axes, boundary, V):
    grid = _Grid(axes)
    if not isinstance(boundary, BoundaryData):
        boundary = BoundaryData(boundary)
    vals = boundary.on_grid(grid.shape)
    V = np.asarray(V, dtype=float)
    return grid, boundary, vals, V


def solve_codim1(axes, boundary, V=None, config: Optional[SolverConfig] = None,
                 initial: Optional[np.ndarray] = None) -> SolveResult:
    """Solve the flux-form translator equation for V along the last axis."""
    config = config or SolverConfig()
    grid, boundary, vals, V = _prepare(axes, boundary, V if V is not None else _vertical(len(axes)))
    if vals.shape[-1] != 1:
        raise ValueError("solve_codim1 needs scalar boundary data")
    if not np.allclose(V, _vertical(grid.n), atol=1e-14):
        raise ValueError("solve_codim1 requires V = eps_(n+1); use solve_system otherwise")
    u0 = harmonic_extension(axes, boundary) if initial is None else np.asarray(initial, float).reshape(vals.shape)
    u0 = np.where(grid.interior[..., None], u0, vals)

    def terms(u, jac):
        R, asm = _codim1_terms(grid, u[..., 0], jac)
        return R[..., None], asm

    u, history, its = _newton(grid, u0, terms, config)
    return SolveResult(GraphPatch(grid.axes, u, V), history, its, "codim1")


def solve_system(axes, boundary, V, config: Optional[SolverConfig] = None,
                 initial: Optional[np.ndarray] = None) -> SolveResult:
    """Solve g^ij u^a_ij = V_a - sum_i u^a_i V_i for any codimension."""
    config = config or SolverConfig()
    grid, boundary, vals, V = _prepare(axes, boundary, V)
    if V.shape != (grid.n + vals.shape[-1],) or abs(np.linalg.norm(V) - 1) > 1e-14:
        raise ValueError("V must be a unit vector of length n + m")
    u0 = harmonic_extension(axes, boundary) if initial is None else np.asarray(initial, float).reshape(vals.shape)
    u0 = np.where(grid.interior[..., None], u0, vals)

    def terms(u, jac):
        return _system_terms(grid, u, V, jac)

    u, history, its = _newton(grid, u0, terms, config)
    return SolveResult(GraphPatch(grid.axes, u, V), history, its, "system")


def _vertical(n):
    V = np.zeros(n + 1)
    V[-1] = 1.0
    return V


# -- reference solutions -----------------------------------------------------

def grim_reaper_reference(x):
    """u(x) = -log cos x on |x| < pi/2."""
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) >= math.pi / 2):
        raise ValueError("the grim reaper is defined only for |x| < pi/2")
    out = -np.log(np.cos(x))
    return float(out) if out.ndim == 0 else out


def rotated_grim_reaper(x, psi: float):
    """Grim reaper in the plane of eps_1 and (0, cos psi, sin psi); returns (..., 2)."""
    u = grim_reaper_reference(x)
    return np.stack([np.cos(psi) * u, np.sin(psi) * u], axis=-1)


_BOWL_START = 1e-4


def _bowl_rhs(n):
    def rhs(r, y):
        up = y[1]
        return [up, (1.0 + up * up) * (1.0 - (n - 1) * up / r)]
    return rhs


def _bowl_series(r, n):
    a = 1.0 / n
    b = a**3 / (n + 2)
    return a * r * r / 2 + b * r**4 / 4, a * r + b * r**3


@lru_cache(maxsize=None)
def _bowl_solution(n: int, r_max: float):
    u0, up0 = _bowl_series(_BOWL_START, n)
    sol = solve_ivp(_bowl_rhs(n), (_BOWL_START, r_max), [u0, up0], method="DOP853",
                    rtol=1e-12, atol=1e-12, dense_output=True)
    if not sol.success:
        raise RuntimeError(f"bowl profile integration failed: {sol.message}")
    return sol


def bowl_reference(r, n: int, derivative: bool = False):
    """Profile of the rotationally symmetric translator with u(0) = u'(0) = 0.

    This is the reference oracle: ``u''/(1 + u'^2) + (n - 1) u'/r = 1`` is
    integrated with DOP853 at rtol = atol = 1e-12, started from its Taylor
    expansion at ``r = 1e-4``.
    """
    if n < 2:
        raise ValueError("the bowl profile needs n >= 2")
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("r must be nonnegative")
    r_max = max(1.0, 2.0 ** math.ceil(math.log2(max(float(r.max(initial=0.0)), 1.0))))
    sol = _bowl_solution(int(n), r_max)
    small = r < _BOWL_START
    out = np.empty(r.shape)
    col = 1 if derivative else 0
    if np.any(~small):
        out[~small] = sol.sol(r[~small])[col]
    if np.any(small):
        out[small] = _bowl_series(r[small], n)[col]
    return float(out) if out.ndim == 0 else out


# -- convergence -------------------------------------------------------------

@dataclass(frozen=True)
class ReferenceProblem:
    """Dirichlet problem with a known solution on the whole grid."""

    name: str
    domain: tuple
    V: tuple
    exact: Callable
    formulation: str = "codim1"

    def axes(self, nodes: int):
        return tuple(np.linspace(a, b, nodes) for a, b in self.domain)

    def exact_on(self, axes):
        coords = np.meshgrid(*axes, indexing="ij")
        vals = np.asarray(self.exact(*coords), dtype=float)
        return vals[..., None] if vals.shape == coords[0].shape else vals

    def solve(self, nodes: int, config: Optional[SolverConfig] = None) -> SolveResult:
        axes = self.axes(nodes)
        bd = BoundaryData(self.exact_on(axes))
        if self.formulation == "codim1":
            return solve_codim1(axes, bd, self.V, config)
        return solve_system(axes, bd, self.V, config)


def grim_reaper_problem(half_width: float = 1.2, formulation: str = "codim1") -> ReferenceProblem:
    return ReferenceProblem("grim_reaper", ((-half_width, half_width),), (0.0, 1.0),
                            grim_reaper_reference, formulation)


def bowl_problem(half_width: float = 1.0, n: int = 2) -> ReferenceProblem:
    V = tuple([0.0] * n + [1.0])

    def exact(*x):
        return bowl_reference(np.sqrt(sum(c * c for c in x)), n)

    return ReferenceProblem("bowl", ((-half_width, half_width),) * n, V, exact)


@dataclass(frozen=True)
class ConvergenceStudy:
    nodes: tuple
    spacing: tuple
    errors: tuple
    orders: tuple
    exact: bool

    @property
    def order(self) -> Optional[float]:
        return None if self.exact else self.orders[-1]


def convergence_study(problem: ReferenceProblem, nodes: Sequence[int],
                      config: Optional[SolverConfig] = None, exact_tol: float = 1e-12) -> ConvergenceStudy:
    """Observed order log2(e_h / e_(h/2)) over nested grids."""
    errors, spacing = [], []
    for count in nodes:
        res = problem.solve(count, config)
        exact = problem.exact_on(res.patch.axes)
        errors.append(float(np.abs(res.patch.u - exact).max()))
        spacing.append(res.patch.spacing[0])
    scale = max(1.0, max(abs(float(np.max(problem.exact_on(problem.axes(nodes[0]))))), 0.0))
    if max(errors) <= exact_tol * scale:
        return ConvergenceStudy(tuple(nodes), tuple(spacing), tuple(errors), (), True)
    orders = tuple(math.log(errors[k] / errors[k + 1]) / math.log(spacing[k] / spacing[k + 1])
                   for k in range(len(errors) - 1))
    return ConvergenceStudy(tuple(nodes), tuple(spacing), tuple(errors), orders, False)
