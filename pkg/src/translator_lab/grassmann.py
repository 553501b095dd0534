"""Oriented n-planes in R^(n+m) and the functions on them used by the lab.

Planes are stored as orthonormal row frames. The pairing ``w(P, Q)`` is the
determinant of the frame inner-product matrix, ``v = 1/w`` relative to a fixed
reference plane, and ``h = (v / (2 - v))**1.5`` is the auxiliary function used
by the curvature estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import mpmath
import numpy as np

FRAME_TOL = 1e-12
CLAMP_SLACK = 1e-12
RIGHT_ANGLE_TOL = 1e-8


class DomainError(ValueError):
    """Raised when a plane or value lies outside the region a formula needs."""


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Subspace:
    """Oriented n-plane spanned by the rows of an orthonormal ``frame``."""

    frame: np.ndarray
    n: int = field(init=False)
    m: int = field(init=False)

    def __post_init__(self):
        frame = np.array(self.frame, dtype=float, ndmin=2)
        n, ambient = frame.shape
        if n < 1 or ambient <= n:
            raise DimensionError(f"frame shape {frame.shape} is not n x (n+m) with m >= 1")
        err = np.abs(frame @ frame.T - np.eye(n)).max()
        if err > FRAME_TOL:
            raise ValueError(f"frame rows are not orthonormal (error {err:.2e})")
        frame.setflags(write=False)
        object.__setattr__(self, "frame", frame)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "m", ambient - n)

    @property
    def ambient(self) -> int:
        return self.n + self.m

    @classmethod
    def from_vectors(cls, vectors) -> "Subspace":
        """Orthonormalize spanning row vectors, keeping their orientation."""
        a = np.array(vectors, dtype=float, ndmin=2)
        q, r = np.linalg.qr(a.T)
        signs = np.sign(np.diag(r))
        if np.any(signs == 0):
            raise ValueError("vectors are linearly dependent")
        return cls((q * signs).T)

    @classmethod
    def coordinate(cls, n: int, m: int) -> "Subspace":
        """The plane span(eps_1, ..., eps_n)."""
        return cls(np.eye(n, n + m))

    def flipped(self) -> "Subspace":
        """Same plane with the opposite orientation."""
        frame = self.frame.copy()
        frame[0] *= -1.0
        return Subspace(frame)


@dataclass(frozen=True)
class JordanAngles:
    """Principal angles between two n-planes, sorted descending."""

    theta: np.ndarray
    mu: np.ndarray
    lam: np.ndarray

    @property
    def p(self) -> int:
        return len(self.theta)

    @classmethod
    def from_theta(cls, theta) -> "JordanAngles":
        theta = np.sort(np.asarray(theta, dtype=float))[::-1]
        if np.any(theta < 0) or np.any(theta > math.pi / 2):
            raise ValueError("Jordan angles must lie in [0, pi/2]")
        mu = np.cos(theta)
        return cls(theta, mu, _tangents(theta, mu))


def _tangents(theta, mu):
    lam = np.full(theta.shape, np.inf)
    finite = theta < math.pi / 2 - RIGHT_ANGLE_TOL
    lam[finite] = np.sqrt(np.clip(1.0 - mu[finite] ** 2, 0.0, None)) / mu[finite]
    return lam


@dataclass(frozen=True)
class GraphCoordinates:
    """Plane spanned by the rows of ``[I_n | Z]`` for an n x m matrix ``Z``."""

    Z: np.ndarray

    def subspace(self) -> Subspace:
        z = np.array(self.Z, dtype=float, ndmin=2)
        n = z.shape[0]
        return Subspace.from_vectors(np.hstack([np.eye(n), z]))


def _check_pair(P: Subspace, Q: Subspace):
    if P.n != Q.n or P.m != Q.m:
        raise DimensionError(f"planes differ in dimension: ({P.n},{P.m}) vs ({Q.n},{Q.m})")


def pairing_w(P: Subspace, Q: Subspace) -> float:
    """w(P, Q) = det(<e_i, f_j>)."""
    _check_pair(P, Q)
    return float(np.linalg.det(P.frame @ Q.frame.T))


def jordan_angles(P: Subspace, Q: Subspace) -> JordanAngles:
    """Jordan angles between P and Q.

    Only the ``p = min(n, m)`` smallest singular values of ``W`` carry angles;
    the remaining ``n - p`` are 1 up to round-off.
    """
    _check_pair(P, Q)
    sigma = np.linalg.svd(P.frame @ Q.frame.T, compute_uv=False)
    p = min(P.n, P.m)
    mu = np.clip(sigma[P.n - p:], 0.0, 1.0)[::-1]
    theta = np.arccos(mu)
    return JordanAngles(theta, mu, _tangents(theta, mu))


def v_function(P: Subspace, P0: Subspace) -> float:
    """v(P, P0) = 1 / w(P, P0) on the region U where w > 0."""
    w = pairing_w(P, P0)
    if w <= 0.0:
        raise DomainError(f"plane is outside U (w(P, P0) = {w:.3g} <= 0)")
    return 1.0 / w


def v_from_graph(Z) -> float:
    """sqrt(det(I + Z Z^T)) computed directly."""
    z = np.array(Z, dtype=float, ndmin=2)
    return math.sqrt(np.linalg.det(np.eye(z.shape[0]) + z @ z.T))


def h_function(v):
    """h = v^(3/2) (2 - v)^(-3/2), defined on U_2 = {1 <= v < 2}.

    Accepts scalars or arrays.
    """
    arr = np.asarray(v, dtype=float)
    if np.any(arr >= 2.0):
        raise DomainError("h is defined only on U_2 (v < 2)")
    if np.any(arr < 1.0 - 1e-12):
        raise DomainError("v must be >= 1")
    out = (arr / (2.0 - arr)) ** 1.5
    return float(out) if out.ndim == 0 else out


def h_derivatives(v):
    """First and second derivatives of h with respect to v."""
    v = np.asarray(v, dtype=float)
    d1 = 3.0 * np.sqrt(v) * (2.0 - v) ** -2.5
    d2 = 3.0 * (1.0 + 2.0 * v) / np.sqrt(v) * (2.0 - v) ** -3.5
    return d1, d2


@dataclass(frozen=True)
class Thresholds:
    v0: float
    u2_bound: float = 2.0
    u3_bound: float = 3.0


def v0_exact(dps: int = 40) -> mpmath.mpf:
    """2 * 3^(2/3) / (1 + 3^(2/3)) in extended precision."""
    with mpmath.workdps(dps):
        c = mpmath.cbrt(9)
        return +(2 * c / (1 + c))


def rigidity_thresholds() -> Thresholds:
    return Thresholds(v0=float(v0_exact()))


@dataclass(frozen=True)
class AdaptedFrames:
    """Frames at P adapted to a reference plane P0.

    Row ``k < p`` of ``tangent`` makes angle ``angles.theta[k]`` with row ``k``
    of ``reference``; ``normal[k]`` is the unit vector of P^perp into which
    ``tangent[k]`` turns as the angle grows. ``tangent`` has the orientation of P.
    """

    tangent: np.ndarray
    normal: np.ndarray
    reference: np.ndarray
    angles: JordanAngles


def _first_nonzero_positive(vectors):
    signs = np.ones(len(vectors))
    for k, row in enumerate(vectors):
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            signs[k] = -1.0
    return signs


def _complete_basis(known: np.ndarray, ambient: int, count: int) -> np.ndarray:
    """``count`` orthonormal vectors orthogonal to the rows of ``known``."""
    proj = np.eye(ambient) - known.T @ known
    u, s, _ = np.linalg.svd(proj)
    return u[:, :count].T


def adapted_frames(P: Subspace, P0: Subspace) -> AdaptedFrames:
    """Singular-vector frames of W = <e_i, eps_j> with the angle block first."""
    _check_pair(P, P0)
    n, m, N = P.n, P.m, P.ambient
    p = min(n, m)
    U, s, Vt = np.linalg.svd(P.frame @ P0.frame.T)
    order = np.argsort(s, kind="stable")
    U, s, Vt = U[:, order], s[order], Vt[order]
    signs = _first_nonzero_positive(U.T)
    U, Vt = U * signs, Vt * signs[:, None]
    tangent = U.T @ P.frame
    reference = Vt @ P0.frame
    if np.linalg.det(U) < 0:
        tangent[n - 1] *= -1.0
        reference[n - 1] *= -1.0

    mu = np.clip(s[:p], 0.0, 1.0)
    theta = np.arccos(mu)
    angles = JordanAngles(theta, mu, _tangents(theta, mu))

    perp0 = _complete_basis(P0.frame, N, m)
    normals = []
    for k in range(p):
        out_part = (tangent[k] @ perp0.T) @ perp0
        sin_k = np.linalg.norm(out_part)
        if sin_k > 1e-8:
            c = out_part / sin_k
            nk = -sin_k * reference[k] + mu[k] * c
            normals.append(nk / np.linalg.norm(nk))
        else:
            normals.append(None)
    known = [row for row in normals if row is not None]
    missing = m - len(known)
    if missing:
        stack = np.vstack([P.frame] + ([np.array(known)] if known else []))
        fill = iter(_complete_basis(stack, N, missing))
        normals = [row if row is not None else next(fill) for row in normals]
        normals += list(fill)
    normal = np.array(normals)
    return AdaptedFrames(tangent, normal, reference, angles)


def grassmann_geodesic(base: Subspace, normals, velocity, t: float) -> Subspace:
    """Point at time ``t`` on the geodesic through ``base``.

    ``velocity[i, a]`` is the rate at which ``base.frame[i]`` turns toward
    ``normals[a]``. The velocity is split by SVD into simultaneous rotations in
    orthogonal 2-planes ``(e_k, n_k)``.
    """
    normals = np.array(normals, dtype=float, ndmin=2)
    x = np.array(velocity, dtype=float, ndmin=2)
    n, m = base.n, base.m
    if normals.shape != (m, base.ambient) or x.shape != (n, m):
        raise DimensionError("normals must be m x (n+m) and velocity n x m")
    full = np.vstack([base.frame, normals])
    if np.abs(full @ full.T - np.eye(n + m)).max() > 1e-10:
        raise ValueError("rotation data is not orthonormal")
    U, rates, Vt = np.linalg.svd(x)
    k = len(rates)
    e = U.T @ base.frame
    c = Vt[:k] @ normals
    moved = e.copy()
    moved[:k] = np.cos(rates * t)[:, None] * e[:k] + np.sin(rates * t)[:, None] * c
    frame = U @ moved
    # re-orthonormalize away accumulated round-off
    q, r = np.linalg.qr(frame.T)
    return Subspace((q * np.sign(np.diag(r))).T)


def _angle_block(angles: JordanAngles, direction):
    x = np.array(direction, dtype=float, ndmin=2)
    p = angles.p
    if min(x.shape) != p:
        raise DimensionError(f"direction shape {x.shape} does not match p = {p}")
    if not np.all(np.isfinite(angles.lam)):
        raise DomainError("a Jordan angle equals pi/2; tan is infinite")
    return x, x[:p, :p], angles.lam


def v_of_angles(angles: JordanAngles) -> float:
    return float(np.prod(1.0 / angles.mu))


def dv_along(angles: JordanAngles, direction) -> float:
    """dv(E) = v * sum_a lam_a x_aa."""
    _, block, lam = _angle_block(angles, direction)
    return v_of_angles(angles) * float(lam @ np.diag(block))


def hess_v_quadratic_form(angles: JordanAngles, direction) -> float:
    """Hess(v)(E, E) for E with coefficients ``direction[i, a]`` in the adapted coframe.

    v^-1 Hess v = g + sum_a 2 lam_a^2 w_aa^2
                  + sum_{a != b} lam_a lam_b (w_aa w_bb + w_ab w_ba)
    """
    x, block, lam = _angle_block(angles, direction)
    d = np.diag(block)
    ld = lam * d
    quad = float(np.sum(x * x))
    quad += 2.0 * float(ld @ ld)
    quad += float(ld.sum() ** 2 - ld @ ld)
    quad += float(np.sum(np.outer(lam, lam) * block * block.T) - ld @ ld)
    return v_of_angles(angles) * quad


def _hev_coefficient(v: float, p: int) -> float:
    # (v-1) / (p v (v^(2/p) - 1)) -> 1/2 as v -> 1
    dv = v - 1.0
    if dv == 0.0:
        ratio = p / 2.0
    else:
        ratio = dv / math.expm1((2.0 / p) * math.log1p(dv))
    return ratio / (p * v) + (p + 1) / (p * v)


def hess_lower_bound_residual(angles: JordanAngles, direction) -> float:
    """Hess(v)(E,E) minus the U_2 lower bound v(2-v)|E|^2 + c(v) dv(E)^2."""
    x, _, _ = _angle_block(angles, direction)
    v = v_of_angles(angles)
    if v >= 2.0:
        raise DomainError("the Hessian lower bound holds only on U_2 (v < 2)")
    dv = dv_along(angles, direction)
    rhs = v * (2.0 - v) * float(np.sum(x * x)) + _hev_coefficient(v, angles.p) * dv * dv
    return hess_v_quadratic_form(angles, direction) - rhs


def hess_h_quadratic_form(angles: JordanAngles, direction) -> float:
    """Hess(h o v)(E, E) by the chain rule."""
    v = v_of_angles(angles)
    h1, h2 = h_derivatives(v)
    dv = dv_along(angles, direction)
    return float(h1 * hess_v_quadratic_form(angles, direction) + h2 * dv * dv)


def hess_h_closed_form(angles: JordanAngles, direction) -> float:
    """3 h |E|^2 + (3/2 + 1/(3p)) h^-1 dh(E)^2."""
    x, _, _ = _angle_block(angles, direction)
    v = v_of_angles(angles)
    h = h_function(v)
    dh = float(h_derivatives(v)[0]) * dv_along(angles, direction)
    return 3.0 * h * float(np.sum(x * x)) + (1.5 + 1.0 / (3 * angles.p)) * dh * dh / h
