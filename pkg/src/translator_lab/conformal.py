"""The conformally flat ambient metric exp((2/n)<V, x>) |dx|^2.

With the exponent 2/n (n = dimension of the submanifold) the induced volume of
an n-dimensional submanifold is its weighted volume, so translators are minimal
in this metric.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
import numba
from scipy.interpolate import RegularGridInterpolator


def _orthonormal_section(section):
    sec = np.array(section, dtype=float, ndmin=2)
    if sec.shape[0] != 2:
        raise ValueError("a section is given by two vectors")
    if np.abs(sec @ sec.T - np.eye(2)).max() > 1e-10:
        raise ValueError("section vectors must be orthonormal")
    return sec


def conformal_sectional_curvature(X, section, n: int, V) -> float:
    """Sectional curvature of exp(2 phi)|dx|^2 with phi = <V, x>/n.

    For a linear phi the conformal change formula reduces to
    exp(-2 phi) (<a, grad phi>^2 + <b, grad phi>^2 - |grad phi|^2).
    """
    a, b = _orthonormal_section(section)
    V = np.asarray(V, dtype=float)
    X = np.asarray(X, dtype=float)
    phi = (V @ X) / n
    return float(np.exp(-2.0 * phi) * ((a @ V) ** 2 + (b @ V) ** 2 - V @ V) / n**2)


def sectional_curvature_fd(metric, X, section, step: float = 1e-3) -> float:
    """Sectional curvature of a general metric field by finite differences.

    ``metric(x)`` returns the matrix g_ij(x). Christoffel symbols come from
    central differences of g; the Riemann tensor from central differences of
    the Christoffel symbols.
    """
    X = np.asarray(X, dtype=float)
    dim = X.size
    eye = np.eye(dim)

    def christoffel(x):
        g_inv = np.linalg.inv(metric(x))
        dg = np.stack([(metric(x + step * eye[k]) - metric(x - step * eye[k])) / (2 * step)
                       for k in range(dim)])  # dg[k, i, j] = d_k g_ij
        first = 0.5 * (np.einsum("ijl->lij", dg) + np.einsum("jil->lij", dg) - dg)
        # first[l, i, j] = (d_i g_jl + d_j g_il - d_l g_ij) / 2
        return np.einsum("kl,lij->kij", g_inv, first)

    gam = christoffel(X)
    dgam = np.stack([(christoffel(X + step * eye[k]) - christoffel(X - step * eye[k])) / (2 * step)
                     for k in range(dim)])  # dgam[k, l, i, j] = d_k Gamma^l_ij
    # R^l_{ijk} for R(d_i, d_j) d_k
    R = (np.einsum("iljk->lijk", dgam) - np.einsum("jlik->lijk", dgam)
         + np.einsum("lim,mjk->lijk", gam, gam) - np.einsum("ljm,mik->lijk", gam, gam))
    a, b = _orthonormal_section(section)
    g = metric(X)
    rabb = np.einsum("lijk,i,j,k->l", R, a, b, b)
    num = a @ g @ rabb
    den = (a @ g @ a) * (b @ g @ b) - (a @ g @ b) ** 2
    return float(num / den)


def conformal_metric(n: int, V):
    V = np.asarray(V, dtype=float)

    def metric(x):
        return np.exp(2.0 * (V @ x) / n) * np.eye(V.size)

    return metric


@dataclass(frozen=True)
class DistanceField:
    """Distance from ``origin`` sampled on an ambient grid."""

    axes: tuple
    rho: np.ndarray
    origin: np.ndarray

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        interp = RegularGridInterpolator(self.axes, self.rho, bounds_error=True)
        return interp(pts.reshape(-1, pts.shape[-1])).reshape(pts.shape[:-1])


def _segment_length(origin, target, n, V, flat):
    """Conformal length of the straight segment (exact for linear phi)."""
    length = np.linalg.norm(target - origin, axis=-1)
    if flat:
        return length
    p0 = (origin @ V) / n
    p1 = (target @ V) / n
    dp = p1 - p0
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(np.abs(dp) > 1e-12, np.expm1(dp) / np.where(dp == 0, 1, dp), 1.0 + dp / 2)
    return length * np.exp(p0) * factor


def conformal_distance(origin, lower, upper, shape, n: int, V, flat: bool = False,
                       order: int = 2) -> DistanceField:
    """Fast-marching distance from ``origin`` in the conformal metric.

    Solves |grad rho| = exp(<V, x>/n) (``flat=True`` replaces the factor by 1)
    on the box ``[lower, upper]`` sampled with ``shape`` nodes. ``order=2``
    uses the second-order upwind stencil wherever two upwind nodes are known
    and falls back to first order otherwise.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    origin = np.asarray(origin, dtype=float)
    V = np.asarray(V, dtype=float)
    dim = lower.size
    if dim > 3:
        raise ValueError("fast marching is limited to ambient dimension <= 3")
    if np.any(origin < lower) or np.any(origin > upper):
        raise ValueError("origin lies outside the domain")
    axes = tuple(np.linspace(lower[k], upper[k], shape[k]) for k in range(dim))
    hs = np.array([a[1] - a[0] for a in axes])
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    slowness = np.ones(tuple(shape)) if flat else np.exp(grid @ V / n)

    T = np.full(tuple(shape), np.inf)
    seed_radius = 1.5 * hs.max()
    near = np.linalg.norm(grid - origin, axis=-1) <= seed_radius
    T[near] = _segment_length(origin, grid[near], n, V, flat)

    padded = np.ones(3, dtype=np.int64)
    padded[:dim] = shape
    hs3 = np.ones(3)
    hs3[:dim] = hs
    flat_T = T.ravel().copy()
    _march(flat_T, near.ravel().copy(), (slowness ** 2).ravel(), padded, hs3, dim, order)
    T = flat_T.reshape(tuple(shape))
    return DistanceField(axes, T, origin)


@numba.njit(cache=True)
def _solve_local(centers, coeffs, count, rhs):
    # insertion sort by center
    for a in range(1, count):
        cb, cc = centers[a], coeffs[a]
        b = a - 1
        while b >= 0 and centers[b] > cb:
            centers[b + 1] = centers[b]
            coeffs[b + 1] = coeffs[b]
            b -= 1
        centers[b + 1] = cb
        coeffs[b + 1] = cc
    while count > 0:
        A = 0.0
        Bq = 0.0
        Cq = -rhs
        for a in range(count):
            A += coeffs[a]
            Bq += coeffs[a] * centers[a]
            Cq += coeffs[a] * centers[a] * centers[a]
        disc = Bq * Bq - A * Cq
        if disc >= 0.0:
            t = (Bq + np.sqrt(disc)) / A
            if t >= centers[count - 1]:
                return t
        count -= 1
    return np.inf


@numba.njit(cache=True)
def _local_update(T, known, slow_sq, shape, strides, hs, dim, order, idx, centers, coeffs):
    count = 0
    for k in range(dim):
        ck = (idx // strides[k]) % shape[k]
        best_c = np.inf
        best_coef = 0.0
        for s in (-1, 1):
            c1 = ck + s
            if c1 < 0 or c1 >= shape[k]:
                continue
            j1 = idx + s * strides[k]
            if not known[j1]:
                continue
            cen = T[j1]
            coef = 1.0 / (hs[k] * hs[k])
            c2 = c1 + s
            if order == 2 and 0 <= c2 < shape[k]:
                j2 = j1 + s * strides[k]
                if known[j2] and T[j2] <= T[j1]:
                    cen = (4.0 * T[j1] - T[j2]) / 3.0
                    coef = 2.25 / (hs[k] * hs[k])
            if cen < best_c:
                best_c = cen
                best_coef = coef
        if best_c < np.inf:
            centers[count] = best_c
            coeffs[count] = best_coef
            count += 1
    return _solve_local(centers, coeffs, count, slow_sq[idx])


@numba.njit(cache=True)
def _march(T, known, slow_sq, shape, hs, dim, order):
    strides = np.array([shape[1] * shape[2], shape[2], 1], dtype=np.int64)
    total = shape[0] * shape[1] * shape[2]
    heap = [(np.inf, np.int64(-1))]
    heap.pop()
    centers = np.empty(3)
    coeffs = np.empty(3)
    frontier = []
    for idx in range(total):
        if known[idx]:
            frontier.append(idx)
    while True:
        for idx in frontier:
            for k in range(dim):
                ck = (idx // strides[k]) % shape[k]
                for s in (-1, 1):
                    if ck + s < 0 or ck + s >= shape[k]:
                        continue
                    j = idx + s * strides[k]
                    if known[j]:
                        continue
                    t = _local_update(T, known, slow_sq, shape, strides, hs, dim, order, j,
                                      centers, coeffs)
                    if t < T[j]:
                        T[j] = t
                        heapq.heappush(heap, (t, j))
        frontier.clear()
        while len(heap) > 0:
            t, idx = heapq.heappop(heap)
            if known[idx] or t > T[idx]:
                continue
            known[idx] = True
            frontier.append(idx)
            break
        if len(frontier) == 0:
            break
