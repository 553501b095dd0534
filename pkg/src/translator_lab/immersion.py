"""Discrete differential geometry of graphs ``x -> (x, u(x))`` sampled on a grid.

All derivatives use second-order stencils: central in the interior, one-sided
on the outermost node layer. Quantities are returned for every node; callers
that want the error model of the interior use :func:`interior_mask`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .grassmann import Subspace

MIN_NODES = 5


@dataclass(frozen=True)
class GraphPatch:
    """Graph of ``u: Omega -> R^m`` over a rectangular lattice, with direction V.

    ``u`` has shape ``(*shape, m)``; ``axes[i]`` holds the uniformly spaced
    coordinates along base axis ``i``.
    """

    axes: tuple
    u: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        shape = tuple(len(a) for a in axes)
        u = np.asarray(self.u, dtype=float)
        if u.shape == shape:
            u = u[..., None]
        if u.shape[:-1] != shape:
            raise ValueError(f"u has shape {u.shape}, expected {shape} + (m,)")
        for a in axes:
            if len(a) < MIN_NODES:
                raise ValueError(f"need at least {MIN_NODES} nodes per axis")
            d = np.diff(a)
            if np.any(d <= 0):
                raise ValueError("grid spacing must be positive")
            if np.ptp(d) > 1e-9 * d.mean():
                raise ValueError("grid spacing must be uniform")
        V = np.asarray(self.V, dtype=float)
        if V.shape != (len(axes) + u.shape[-1],):
            raise ValueError(f"V must have length n + m = {len(axes) + u.shape[-1]}")
        if abs(np.linalg.norm(V) - 1.0) > 1e-14:
            raise ValueError("V must be a unit vector")
        object.__setattr__(self, "axes", axes)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "V", V)

    @classmethod
    def from_function(cls, func: Callable, axes: Sequence, V) -> "GraphPatch":
        """Sample ``func(*coords)`` on the tensor grid built from ``axes``."""
        coords = np.meshgrid(*[np.asarray(a, dtype=float) for a in axes], indexing="ij")
        return cls(tuple(axes), np.asarray(func(*coords), dtype=float), V)

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def m(self) -> int:
        return self.u.shape[-1]

    @property
    def shape(self) -> tuple:
        return self.u.shape[:-1]

    @property
    def spacing(self) -> tuple:
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def domain(self) -> tuple:
        return tuple((float(a[0]), float(a[-1])) for a in self.axes)

    @property
    def coords(self) -> np.ndarray:
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    @property
    def position(self) -> np.ndarray:
        """Ambient position X = (x, u(x)), shape ``(*shape, n+m)``."""
        return np.concatenate([self.coords, self.u], axis=-1)

    def with_u(self, u) -> "GraphPatch":
        return GraphPatch(self.axes, u, self.V)

    def crop(self, box) -> "GraphPatch":
        """Sub-patch of the nodes inside ``box = [(lo, hi), ...]``."""
        index = []
        for a, (lo, hi) in zip(self.axes, box):
            keep = np.flatnonzero((a >= lo - 1e-12) & (a <= hi + 1e-12))
            index.append(slice(keep[0], keep[-1] + 1))
        index = tuple(index)
        return GraphPatch(tuple(a[i] for a, i in zip(self.axes, index)), self.u[index], self.V)


def interior_mask(shape, layer: int = 2) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[tuple(slice(layer, s - layer) for s in shape)] = True
    return mask


# -- stencils ----------------------------------------------------------------

def d1(f, axis, h):
    return np.gradient(f, h, axis=axis, edge_order=2)


def d2(f, axis, h):
    f = np.moveaxis(np.asarray(f, dtype=float), axis, 0)
    out = np.empty_like(f)
    out[1:-1] = f[2:] - 2.0 * f[1:-1] + f[:-2]
    out[0] = 2.0 * f[0] - 5.0 * f[1] + 4.0 * f[2] - f[3]
    out[-1] = 2.0 * f[-1] - 5.0 * f[-2] + 4.0 * f[-3] - f[-4]
    return np.moveaxis(out / (h * h), 0, axis)


def gradient(f, spacing):
    """Stack of partial derivatives, new last axis of length n."""
    return np.stack([d1(f, i, h) for i, h in enumerate(spacing)], axis=-1)


def hessian(f, spacing):
    """Coordinate second derivatives, two new trailing axes of length n."""
    n = len(spacing)
    out = np.empty(np.shape(f) + (n, n))
    for i in range(n):
        out[..., i, i] = d2(f, i, spacing[i])
        for j in range(i + 1, n):
            out[..., i, j] = out[..., j, i] = d1(d1(f, i, spacing[i]), j, spacing[j])
    return out


def _fd_apply(f, spacing, op):
    """Apply a derivative ``op`` to a field with optional trailing value axes."""
    n = len(spacing)
    f = np.asarray(f, dtype=float)
    extra = f.shape[n:]
    flat = f.reshape(f.shape[:n] + (-1,))
    res = np.stack([op(flat[..., k], spacing) for k in range(flat.shape[-1])], axis=n)
    return res.reshape(f.shape[:n] + extra + res.shape[n + 1:])


# -- shape data --------------------------------------------------------------

@dataclass
class ShapeData:
    """Per-node geometric data of a graph patch.

    Array layouts (``...`` is the grid shape):
    ``tangents (..., n, N)``, ``g (..., n, n)``, ``frame (..., n, N)``
    orthonormal tangents, ``normals (..., m, N)``, ``h_coord (..., m, n, n)``
    coordinate components, ``h (..., m, n, n)`` components in ``frame``.
    """

    position: np.ndarray
    tangents: np.ndarray
    g: np.ndarray
    g_inv: np.ndarray
    sqrt_det_g: np.ndarray
    frame: np.ndarray
    frame_coeffs: np.ndarray
    normals: Optional[np.ndarray] = None
    h_coord: Optional[np.ndarray] = None
    h: Optional[np.ndarray] = None
    H: Optional[np.ndarray] = None
    H_vec: Optional[np.ndarray] = None
    B_norm_sq: Optional[np.ndarray] = None
    S: Optional[np.ndarray] = None

    def B_norm_sq_contracted(self) -> np.ndarray:
        """|B|^2 = g^ik g^jl h_ij h_kl, the coordinate path."""
        a = np.einsum("...ik,...akl->...ail", self.g_inv, self.h_coord)
        return np.einsum("...aij,...aji->...", a, a)


def _jets(patch: GraphPatch):
    du = _fd_apply(patch.u, patch.spacing, gradient)  # (..., m, n)
    return du


def induced_metric(patch: GraphPatch) -> ShapeData:
    """g_ij = delta_ij + sum_a u^a_i u^a_j with the orthonormalized tangent frame."""
    n, m = patch.n, patch.m
    du = _jets(patch)
    eye = np.broadcast_to(np.eye(n), patch.shape + (n, n))
    tangents = np.concatenate([eye, np.swapaxes(du, -1, -2)], axis=-1)
    g = np.eye(n) + np.einsum("...ai,...aj->...ij", du, du)
    g_inv = np.linalg.inv(g)
    chol = np.linalg.cholesky(g)
    coeffs = np.linalg.inv(chol)  # E_k = sum_i C_ki T_i (Gram-Schmidt order)
    frame = coeffs @ tangents
    return ShapeData(
        position=patch.position,
        tangents=tangents,
        g=g,
        g_inv=g_inv,
        sqrt_det_g=np.sqrt(np.linalg.det(g)),
        frame=frame,
        frame_coeffs=coeffs,
    )


def normal_frame(patch: GraphPatch, du=None) -> np.ndarray:
    """Gram-Schmidt on (-Du^a, e_a) in the order a = 1..m."""
    n, m = patch.n, patch.m
    if du is None:
        du = _jets(patch)
    raw = np.concatenate([-du, np.broadcast_to(np.eye(m), patch.shape + (m, m))], axis=-1)
    out = np.empty_like(raw)
    for a in range(m):
        vec = raw[..., a, :].copy()
        for b in range(a):
            vec -= np.sum(vec * out[..., b, :], axis=-1, keepdims=True) * out[..., b, :]
        out[..., a, :] = vec / np.linalg.norm(vec, axis=-1, keepdims=True)
    return out


def second_fundamental_form(patch: GraphPatch) -> ShapeData:
    """Full ShapeData: normal frame, h_{a,ij}, H^a, |B|^2 and S_ab."""
    n = patch.n
    data = induced_metric(patch)
    normals = normal_frame(patch)
    d2u = _fd_apply(patch.u, patch.spacing, hessian)  # (..., m, n, n)
    # d^2 X / dx^i dx^j = (0, u_ij)
    h_coord = np.einsum("...bij,...ab->...aij", d2u, normals[..., n:])
    C = data.frame_coeffs
    h = np.einsum("...ki,...aij,...lj->...akl", C, h_coord, C)
    H = np.einsum("...ij,...aij->...a", data.g_inv, h_coord)
    data.normals = normals
    data.h_coord = h_coord
    data.h = h
    data.H = H
    data.H_vec = np.einsum("...a,...aK->...K", H, normals)
    data.S = np.einsum("...aij,...bij->...ab", h, h)
    data.B_norm_sq = np.einsum("...aa->...", data.S)
    return data


@dataclass(frozen=True)
class TranslatorResidual:
    residual: np.ndarray  # (..., m) components H^a - <V, e_a>
    max_norm: float


def translator_residual(patch: GraphPatch, shape: ShapeData = None, include_boundary: bool = False,
                        layer: int = 2) -> TranslatorResidual:
    """R = H - V^N in the normal frame, with its max norm over the interior."""
    if shape is None or shape.H is None:
        shape = second_fundamental_form(patch)
    vn = np.einsum("...aK,K->...a", shape.normals, patch.V)
    res = shape.H - vn
    mag = np.linalg.norm(res, axis=-1)
    if not include_boundary:
        mag = mag[interior_mask(patch.shape, layer)]
    return TranslatorResidual(res, float(mag.max()))


# -- Gauss map ---------------------------------------------------------------

def gauss_map(patch: GraphPatch, node, shape: ShapeData = None) -> Subspace:
    """Oriented tangent plane at ``node`` (a grid index tuple)."""
    if shape is None:
        shape = induced_metric(patch)
    return Subspace.from_vectors(shape.tangents[tuple(node)])


def gauss_projection(shape: ShapeData) -> np.ndarray:
    """Orthogonal projector onto the tangent plane, shape ``(..., N, N)``."""
    return np.einsum("...kI,...kJ->...IJ", shape.frame, shape.frame)


def gauss_map_energy(patch: GraphPatch, shape: ShapeData = None) -> np.ndarray:
    """|d gamma|^2 from finite differences of the Gauss map.

    The tangent plane is embedded as its projector Pi; with the Grassmannian
    metric, |d gamma(X)|^2 = tr(dPi(X)^2) / 2.
    """
    if shape is None:
        shape = induced_metric(patch)
    proj = gauss_projection(shape)
    dproj = _fd_apply(proj, patch.spacing, gradient)  # (..., N, N, n)
    pair = np.einsum("...IJi,...JIj->...ij", dproj, dproj)
    return 0.5 * np.einsum("...ij,...ij->...", shape.g_inv, pair)


def w_function(patch: GraphPatch, shape: ShapeData = None, reference: Subspace = None) -> np.ndarray:
    """w(gamma(x), P0) at every node; P0 defaults to the base plane."""
    if shape is None:
        shape = induced_metric(patch)
    if reference is None:
        reference = Subspace.coordinate(patch.n, patch.m)
    W = np.einsum("...iK,jK->...ij", shape.frame, reference.frame)
    return np.linalg.det(W)


# -- operators ---------------------------------------------------------------

def laplace_beltrami(patch: GraphPatch, f, shape: ShapeData = None) -> np.ndarray:
    """(1/sqrt g) d_i(sqrt g g^ij d_j f), expanded by the product rule."""
    return _laplacian(patch, f, shape, drift=False)


def drift_laplacian(patch: GraphPatch, f, shape: ShapeData = None) -> np.ndarray:
    """L f = Laplace-Beltrami f + <V, grad f>.

    ``f`` may carry trailing value axes (applied componentwise).
    """
    return _laplacian(patch, f, shape, drift=True)


def _laplacian(patch, f, shape, drift):
    if shape is None:
        shape = induced_metric(patch)
    n, sp = patch.n, patch.spacing
    f = np.asarray(f, dtype=float)
    extra = f.ndim - n
    df = _fd_apply(f, sp, gradient)  # (..., *extra, n)
    d2f = _fd_apply(f, sp, hessian)  # (..., *extra, n, n)
    coef = shape.sqrt_det_g[..., None, None] * shape.g_inv
    div_coef = np.zeros(patch.shape + (n,))
    for i in range(n):
        div_coef += d1(coef[..., i, :], i, sp[i])
    div_coef /= shape.sqrt_det_g[..., None]
    ginv = shape.g_inv.reshape(patch.shape + (1,) * extra + (n, n))
    dc = div_coef.reshape(patch.shape + (1,) * extra + (n,))
    out = np.sum(dc * df, axis=-1) + np.einsum("...ij,...ij->...", ginv, d2f)
    if drift:
        vt = np.einsum("...iK,K->...i", shape.tangents, patch.V)
        vt = vt.reshape(patch.shape + (1,) * extra + (n,))
        out = out + np.einsum("...ij,...i,...j->...", ginv, vt, df)
    return out


def gradient_norm_sq(patch: GraphPatch, f, shape: ShapeData = None) -> np.ndarray:
    """|grad f|^2 = g^ij d_i f d_j f."""
    if shape is None:
        shape = induced_metric(patch)
    df = gradient(np.asarray(f, dtype=float), patch.spacing)
    return np.einsum("...ij,...i,...j->...", shape.g_inv, df, df)


def integrate(patch: GraphPatch, values) -> float:
    """Composite trapezoid rule over the base domain."""
    out = np.asarray(values, dtype=float)
    for axis in reversed(range(patch.n)):
        out = np.trapezoid(out, patch.axes[axis], axis=axis)
    return float(out)


def weighted_volume(patch: GraphPatch, shape: ShapeData = None) -> float:
    """F(M) = integral of exp(<V, X>) over M."""
    if shape is None:
        shape = induced_metric(patch)
    return integrate(patch, np.exp(shape.position @ patch.V) * shape.sqrt_det_g)


def extrinsic_radius(patch: GraphPatch, base) -> np.ndarray:
    """|X - base| at every node."""
    return np.linalg.norm(patch.position - np.asarray(base, dtype=float), axis=-1)


def normal_curvature(shape: ShapeData) -> np.ndarray:
    """Max over pairs (a, b) of |[A^a, A^b]|, the normal-bundle curvature size."""
    h = shape.h
    m = h.shape[-3]
    out = np.zeros(h.shape[:-3])
    for a in range(m):
        for b in range(a + 1, m):
            comm = h[..., a, :, :] @ h[..., b, :, :] - h[..., b, :, :] @ h[..., a, :, :]
            out = np.maximum(out, np.linalg.norm(comm, axis=(-2, -1)))
    return out


def codazzi_defect(patch: GraphPatch, shape: ShapeData = None) -> np.ndarray:
    """max over (a, i, j, k) of |(nabla_i h)_a,jk - (nabla_j h)_a,ik| at every node.

    Coordinate components with Christoffel symbols
    Gamma^l_ij = g^lm <d_i d_j X, d_m X> and the normal connection
    <d_i e_b, e_a>.
    """
    if shape is None or shape.h_coord is None:
        shape = second_fundamental_form(patch)
    n = patch.n
    sp = patch.spacing
    du = _jets(patch)  # (..., m, n)
    d2u = _fd_apply(patch.u, sp, hessian)  # (..., m, n, n)
    gamma = np.einsum("...lm,...aij,...am->...lij", shape.g_inv, d2u, du)
    dh = _fd_apply(shape.h_coord, sp, gradient)  # (..., a, j, k, i)
    dn = _fd_apply(shape.normals, sp, gradient)  # (..., b, K, i)
    conn = np.einsum("...bKi,...aK->...iab", dn, shape.normals)
    cov = (np.moveaxis(dh, -1, -4)  # (..., i, a, j, k)
           - np.einsum("...lij,...alk->...iajk", gamma, shape.h_coord)
           - np.einsum("...lik,...ajl->...iajk", gamma, shape.h_coord)
           + np.einsum("...iab,...bjk->...iajk", conn, shape.h_coord))
    if n == 1:
        return np.zeros(patch.shape)
    sym = cov - np.swapaxes(cov, -4, -2)  # swap i and j
    return np.abs(sym).reshape(patch.shape + (-1,)).max(axis=-1)

# -- file format -------------------------------------------------------------

PATCH_FORMAT = "translator-lab-patch"
PATCH_VERSION = 1


def _node_table_path(header_path: Path) -> Path:
    return header_path.with_suffix(".csv")


def write_patch(patch: GraphPatch, path) -> tuple:
    """Write ``<stem>.json`` (header) and ``<stem>.csv`` (node table).

    The CSV holds one row per node in C order with columns ``x1..xn,u1..um``;
    every number is written with ``repr`` so reading it back is bit-identical.
    """
    path = Path(path).with_suffix(".json")
    table = _node_table_path(path)
    header = {
        "format": PATCH_FORMAT,
        "version": PATCH_VERSION,
        "n": patch.n,
        "m": patch.m,
        "V": [float(c) for c in patch.V],
        "domain": [list(d) for d in patch.domain],
        "shape": list(patch.shape),
        "nodes": table.name,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(header, indent=2) + "\n")
    cols = [f"x{i + 1}" for i in range(patch.n)] + [f"u{a + 1}" for a in range(patch.m)]
    rows = np.concatenate([patch.coords, patch.u], axis=-1).reshape(-1, patch.n + patch.m)
    with table.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])
    return path, table


def read_patch(path) -> GraphPatch:
    """Inverse of :func:`write_patch`; ``path`` may omit the ``.json`` suffix."""
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    header = json.loads(path.read_text())
    if header.get("format") != PATCH_FORMAT:
        raise ValueError(f"{path} is not a patch header")
    n, m, shape = header["n"], header["m"], tuple(header["shape"])
    with (path.parent / header["nodes"]).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    if data.shape != (int(np.prod(shape)), n + m):
        raise ValueError(f"node table does not match shape {shape} with n={n}, m={m}")
    grid = data.reshape(shape + (n + m,))
    axes = []
    for i in range(n):
        index = [0] * n
        index[i] = slice(None)
        axes.append(grid[tuple(index) + (i,)].copy())
    return GraphPatch(tuple(axes), grid[..., n:], np.array(header["V"], dtype=float))
