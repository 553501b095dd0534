"""Pointwise identity and inequality checks on sampled translators.

Every check evaluates a left- and a right-hand side through separate code
paths on the interior nodes and compares the discrepancy against
``C * h^2 * scale`` with ``C = 10`` and ``scale = max(|LHS|, |RHS|, 1)``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import immersion as imm
from .conformal import conformal_distance
from .grassmann import Subspace, adapted_frames, h_function

TOL_CONSTANT = 10.0
V_MARGIN = 1e-6


class NotATranslatorError(ValueError):
    pass


def worker_count() -> int:
    """Thread cap from TRANSLATOR_LAB_THREADS (default: CPU count)."""
    raw = os.environ.get("TRANSLATOR_LAB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"TRANSLATOR_LAB_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


@dataclass
class Check:
    name: str
    anchor: str
    max_violation: float
    tolerance: float
    nodes_evaluated: int
    nodes_skipped: int = 0
    scale: float = 1.0

    @property
    def passed(self) -> bool:
        return bool(self.max_violation <= self.tolerance)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "anchor": self.anchor,
            "max_violation": self.max_violation,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "nodes_evaluated": self.nodes_evaluated,
            "nodes_skipped": self.nodes_skipped,
            "scale": self.scale,
        }


@dataclass
class DiagnosticsReport:
    checks: list
    grid: dict
    provenance: dict = field(default_factory=dict)
    estimates: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def names(self) -> list:
        return [c.name for c in self.checks]

    def merge(self, other: "DiagnosticsReport") -> "DiagnosticsReport":
        return DiagnosticsReport(self.checks + other.checks, self.grid,
                                 {**self.provenance, **other.provenance},
                                 {**self.estimates, **other.estimates},
                                 {**self.notes, **other.notes})

    def as_dict(self) -> dict:
        return {
            "checks": [c.as_dict() for c in self.checks],
            "grid": self.grid,
            "provenance": self.provenance,
            "estimates": self.estimates,
            "notes": self.notes,
            "pass": self.passed,
        }

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.as_dict()), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["name", "anchor", "max_violation", "tolerance", "pass", "nodes_evaluated"])
        for c in self.checks:
            writer.writerow([c.name, c.anchor, repr(c.max_violation), repr(c.tolerance),
                             str(c.passed).lower(), c.nodes_evaluated])
        return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        val = float(obj)
        return val if math.isfinite(val) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def patch_digest(patch: imm.GraphPatch) -> str:
    h = hashlib.sha256()
    for a in patch.axes:
        h.update(np.ascontiguousarray(a).tobytes())
    h.update(np.ascontiguousarray(patch.u).tobytes())
    h.update(np.ascontiguousarray(patch.V).tobytes())
    return h.hexdigest()


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(_jsonable(config), sort_keys=True).encode()).hexdigest()


def grid_info(patch: imm.GraphPatch) -> dict:
    return {"n": patch.n, "m": patch.m, "shape": list(patch.shape), "h": list(patch.spacing)}


# -- helpers -----------------------------------------------------------------

def _h(patch) -> float:
    return max(patch.spacing)


def _compare(name, anchor, lhs, rhs, mask, patch, skipped=0, constant=TOL_CONSTANT,
             floor: float = 1.0) -> Check:
    """Max pointwise |lhs - rhs| over ``mask``; trailing axes are reduced by a norm.

    ``scale`` is max(|lhs|, |rhs|, floor) over the mask.
    """
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.broadcast_to(np.asarray(rhs, dtype=float), lhs.shape)
    diff = lhs - rhs
    extra = tuple(range(patch.n, lhs.ndim))
    if extra:
        diff = np.sqrt(np.sum(diff * diff, axis=extra))
        lmag = np.sqrt(np.sum(lhs * lhs, axis=extra))
        rmag = np.sqrt(np.sum(rhs * rhs, axis=extra))
    else:
        diff, lmag, rmag = np.abs(diff), np.abs(lhs), np.abs(rhs)
    count = int(mask.sum())
    if count == 0:
        return Check(name, anchor, 0.0, constant * _h(patch) ** 2, 0, skipped)
    scale = max(float(lmag[mask].max()), float(rmag[mask].max()), floor)
    return Check(name, anchor, float(diff[mask].max()), constant * _h(patch) ** 2 * scale, count,
                 skipped, scale)


def _slack(name, anchor, lhs, rhs, mask, patch, skipped=0, constant=TOL_CONSTANT) -> Check:
    """Inequality lhs >= rhs: violation is max(0, -(lhs - rhs))."""
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.broadcast_to(np.asarray(rhs, dtype=float), lhs.shape)
    count = int(mask.sum())
    if count == 0:
        return Check(name, anchor, 0.0, constant * _h(patch) ** 2, 0, skipped)
    slack = (lhs - rhs)[mask]
    scale = max(float(np.abs(lhs[mask]).max()), float(np.abs(rhs[mask]).max()), 1.0)
    return Check(name, anchor, max(0.0, float(-slack.min())), constant * _h(patch) ** 2 * scale,
                 count, skipped, scale)


def _directional(patch, field_, shape):
    """Derivatives of a vector field along the orthonormal tangent frame.

    Returns ``(..., n, K)`` with entry ``[j]`` = D_{E_j} field.
    """
    coord = imm._fd_apply(field_, patch.spacing, imm.gradient)  # (..., K, n)
    return np.einsum("...ji,...Ki->...jK", shape.frame_coeffs, coord)


def _normal_projector(shape):
    return np.einsum("...aI,...aJ->...IJ", shape.normals, shape.normals)


def _grassmann_tangent(proj, Y):
    comp = np.eye(proj.shape[-1]) - proj
    return proj @ Y @ comp + comp @ Y @ proj


def _grassmann_norm(Y):
    return np.sqrt(0.5 * np.einsum("...IJ,...JI->...", Y, Y))


def gauss_differential(shape) -> np.ndarray:
    """d gamma(E_i) = sum h_{a,ij} (e_a e_j^T + e_j e_a^T), shape ``(..., n, N, N)``."""
    outer = np.einsum("...aI,...jJ->...ajIJ", shape.normals, shape.frame)
    sym = outer + np.swapaxes(outer, -1, -2)
    return np.einsum("...aij,...ajIJ->...iIJ", shape.h, sym)


def _composition_matrix(N: int) -> np.ndarray:
    """Fixed symmetric matrix defining the test function F(Pi) = tr(A Pi)."""
    k = np.arange(1, N + 1, dtype=float)
    return np.diag(k / N) + 0.25 * np.cos(np.add.outer(k, k))


def is_flat_normal_bundle(patch, shape, mask=None, constant=TOL_CONSTANT) -> tuple:
    """(flat?, max commutator norm, threshold)."""
    if patch.m == 1:
        return True, 0.0, 0.0
    mask = imm.interior_mask(patch.shape) if mask is None else mask
    curv = imm.normal_curvature(shape)
    scale = max(1.0, float(shape.B_norm_sq[mask].max()))
    limit = constant * _h(patch) ** 2 * scale
    worst = float(curv[mask].max())
    return worst <= limit, worst, limit


def translator_gate(patch, shape=None, constant=TOL_CONSTANT) -> tuple:
    """(is translator?, residual, gate) with gate = max(1e-8, C h^2 scale)."""
    shape = shape or imm.second_fundamental_form(patch)
    res = imm.translator_residual(patch, shape).max_norm
    scale = max(1.0, float(np.abs(shape.H[imm.interior_mask(patch.shape)]).max()))
    gate = max(1e-8, constant * _h(patch) ** 2 * scale)
    return res <= gate, res, gate


# -- identity checks ---------------------------------------------------------

ANCHORS = {
    "DH": "grad^perp_j H = -<V, e_k> B(e_j, e_k) on translators",
    "w_identity_flat": "L w = -|B|^2 w for a flat normal bundle",
    "w_identity": "L w = -|B|^2 w + sum (h_aij h_bik - h_bij h_aik) <e_(aj,bk), P0>",
    "v_identity": "L v = v|B|^2 + v sum 2 lam_a^2 h_(a,aj)^2 + v sum lam_a lam_b (h_(a,aj) h_(b,bj) + h_(a,bj) h_(b,aj))",
    "tension": "tau_f(gamma) = 0 for f = <V, X> (Gauss map is f-harmonic)",
    "rvtype": "tau_f(gamma) = grad_j (H^a - V^a) e_(aj)",
    "gauss_energy": "|d gamma|^2 = |B|^2",
    "composition": "L (F o gamma) = sum_i Hess F(gamma_* e_i, gamma_* e_i)",
    "dr": "Laplacian |X|^2 = 2n + 2 <V^N, X>",
    "codazzi": "(nabla_i B)(e_j, e_k) symmetric in i and j",
    "simons": "L |B|^2 >= 2 |grad |B||^2 - k |B|^4",
    "nv": "|grad v|^2 <= v^4 |B|^2",
    "propv_h": "L h >= 3 h |B|^2 where v < 2",
    "propv_v": "L v >= 0 where v <= 3",
}

TRANSLATOR_ONLY = ("DH", "w_identity_flat", "w_identity", "v_identity", "tension", "composition", "dr")
DEFINITION_LEVEL = ("gauss_energy", "rvtype", "codazzi")
IDENTITY_CHECKS = TRANSLATOR_ONLY + DEFINITION_LEVEL
INEQUALITY_CHECKS = ("simons", "nv", "propv_h", "propv_v")


@dataclass
class _Context:
    patch: imm.GraphPatch
    shape: imm.ShapeData
    mask: np.ndarray
    layer: int

    @property
    def reference(self):
        return Subspace.coordinate(self.patch.n, self.patch.m)


def _check_DH(ctx):
    p, s = ctx.patch, ctx.shape
    dH = _directional(p, s.H_vec, s)  # (..., n, N)
    lhs = np.einsum("...IJ,...jJ->...jI", _normal_projector(s), dH)
    vt = np.einsum("...kK,K->...k", s.frame, p.V)
    rhs = -np.einsum("...k,...ajk,...aI->...jI", vt, s.h, s.normals)
    return _compare("DH", ANCHORS["DH"], lhs, rhs, ctx.mask, p)


def _w_and_laplacian(ctx):
    w = imm.w_function(ctx.patch, ctx.shape, ctx.reference)
    return w, imm.drift_laplacian(ctx.patch, w, ctx.shape)


def _check_w_flat(ctx):
    p, s = ctx.patch, ctx.shape
    flat, worst, limit = is_flat_normal_bundle(p, s, ctx.mask)
    if not flat:
        return Check("w_identity_flat", ANCHORS["w_identity_flat"], 0.0, 0.0, 0, int(ctx.mask.sum()))
    w, lw = _w_and_laplacian(ctx)
    return _compare("w_identity_flat", ANCHORS["w_identity_flat"], lw, -s.B_norm_sq * w, ctx.mask, p)


def _double_replacement(shape, reference):
    """sum_i sum_{a<b, j!=k} (h_aij h_bik - h_bij h_aik) <e_(aj,bk), P0>."""
    h, E, Nrm = shape.h, shape.frame, shape.normals
    n, m = E.shape[-2], Nrm.shape[-2]
    P0 = reference.frame
    out = np.zeros(E.shape[:-2])
    for a in range(m):
        for b in range(a + 1, m):
            for j in range(n):
                for k in range(n):
                    if j == k:
                        continue
                    vecs = E.copy()
                    vecs[..., j, :] = Nrm[..., a, :]
                    vecs[..., k, :] = Nrm[..., b, :]
                    pairing = np.linalg.det(np.einsum("...iK,lK->...il", vecs, P0))
                    coeff = np.einsum("...i,...i->...", h[..., a, :, j], h[..., b, :, k]) \
                        - np.einsum("...i,...i->...", h[..., b, :, j], h[..., a, :, k])
                    out = out + coeff * pairing
    return out


def _check_w_full(ctx):
    p, s = ctx.patch, ctx.shape
    w, lw = _w_and_laplacian(ctx)
    rhs = -s.B_norm_sq * w + _double_replacement(s, ctx.reference)
    return _compare("w_identity", ANCHORS["w_identity"], lw, rhs, ctx.mask, p)


def _adapted_second_fundamental_form(ctx, node):
    """(v, lam, h in adapted frames) at one node."""
    s = ctx.shape
    P = Subspace(s.frame[node])
    fr = adapted_frames(P, ctx.reference)
    rot_t = fr.tangent @ s.frame[node].T  # adapted tangent in terms of E
    rot_n = fr.normal @ s.normals[node].T
    h = np.einsum("ab,bkl,ik,jl->aij", rot_n, s.h[node], rot_t, rot_t)
    return fr.angles, h


def _v_identity_rhs(v, lam, h, B2):
    p = lam.size
    diag = np.array([h[a, a, :] for a in range(p)])  # h_{a, a j}, shape (p, n)
    total = B2 + 2.0 * float(np.sum((lam ** 2)[:, None] * diag ** 2))
    for a in range(p):
        for b in range(p):
            if a == b:
                continue
            total += lam[a] * lam[b] * float(diag[a] @ diag[b] + h[a, b, :] @ h[b, a, :])
    return v * total


def _check_v_identity(ctx):
    p, s = ctx.patch, ctx.shape
    w = imm.w_function(p, s, ctx.reference)
    with np.errstate(divide="ignore"):
        v = np.where(w > 0, 1.0 / w, np.inf)
    usable = ctx.mask & (v < 2.0 - V_MARGIN)
    lhs = np.zeros(p.shape)
    rhs = np.zeros(p.shape)
    if np.all(np.isfinite(v)):
        lhs = imm.drift_laplacian(p, v, s)
    else:
        usable &= False
    for node in zip(*np.nonzero(usable)):
        angles, h = _adapted_second_fundamental_form(ctx, node)
        vv = float(np.prod(1.0 / angles.mu))
        rhs[node] = _v_identity_rhs(vv, angles.lam, h, float(np.sum(h * h)))
    skipped = int(ctx.mask.sum() - usable.sum())
    return _compare("v_identity", ANCHORS["v_identity"], lhs, rhs, usable, p, skipped)


def _tension(ctx):
    p, s = ctx.patch, ctx.shape
    proj = imm.gauss_projection(s)
    return proj, _grassmann_tangent(proj, imm.drift_laplacian(p, proj, s))


def _check_tension(ctx):
    _, tau = _tension(ctx)
    lhs = _grassmann_norm(tau)
    return _compare("tension", ANCHORS["tension"], lhs, 0.0, ctx.mask, ctx.patch)


def _check_rvtype(ctx):
    p, s = ctx.patch, ctx.shape
    _, tau = _tension(ctx)
    vn = np.einsum("...aK,K,...aJ->...J", s.normals, p.V, s.normals)
    d = _directional(p, s.H_vec - vn, s)  # (..., n, N)
    coeff = np.einsum("...jK,...aK->...aj", d, s.normals)
    outer = np.einsum("...aI,...jJ->...ajIJ", s.normals, s.frame)
    rhs = np.einsum("...aj,...ajIJ->...IJ", coeff, outer + np.swapaxes(outer, -1, -2))
    # the Grassmannian metric is half the Frobenius one
    return _compare("rvtype", ANCHORS["rvtype"], tau / math.sqrt(2), rhs / math.sqrt(2), ctx.mask, p,
                    floor=_curvature_floor(ctx))


def _curvature_floor(ctx) -> float:
    """max(1, max |B|): both sides differentiate B, so their error grows with it."""
    if not ctx.mask.any():
        return 1.0
    return max(1.0, float(np.sqrt(ctx.shape.B_norm_sq[ctx.mask].max())))


def _check_gauss_energy(ctx):
    p, s = ctx.patch, ctx.shape
    return _compare("gauss_energy", ANCHORS["gauss_energy"], imm.gauss_map_energy(p, s),
                    s.B_norm_sq_contracted(), ctx.mask, p)


def _check_composition(ctx):
    p, s = ctx.patch, ctx.shape
    A = _composition_matrix(p.n + p.m)
    proj = imm.gauss_projection(s)
    phi = np.einsum("IJ,...JI->...", A, proj)
    lhs = imm.drift_laplacian(p, phi, s)
    # Hess F(Y, Y) = tr(A (2 Y Pi Y - Pi Y^2 - Y^2 Pi)) for F linear in Pi
    Y = gauss_differential(s)
    P = proj[..., None, :, :]
    Y2 = Y @ Y
    hess = 2.0 * Y @ P @ Y - P @ Y2 - Y2 @ P
    rhs = np.einsum("IJ,...iJI->...", A, hess)
    return _compare("composition", ANCHORS["composition"], lhs, rhs, ctx.mask, p)


def _check_dr(ctx):
    p, s = ctx.patch, ctx.shape
    X = s.position
    lhs = imm.laplace_beltrami(p, np.sum(X * X, axis=-1), s)
    vn = np.einsum("...aK,K,...aJ->...J", s.normals, p.V, s.normals)
    rhs = 2 * p.n + 2 * np.sum(vn * X, axis=-1)
    return _compare("dr", ANCHORS["dr"], lhs, rhs, ctx.mask, p)


def _check_codazzi(ctx):
    p, s = ctx.patch, ctx.shape
    return _compare("codazzi", ANCHORS["codazzi"], imm.codazzi_defect(p, s), 0.0, ctx.mask, p,
                    floor=_curvature_floor(ctx))


_IDENTITY_IMPL = {
    "codazzi": _check_codazzi,
    "DH": _check_DH,
    "w_identity_flat": _check_w_flat,
    "w_identity": _check_w_full,
    "v_identity": _check_v_identity,
    "tension": _check_tension,
    "rvtype": _check_rvtype,
    "gauss_energy": _check_gauss_energy,
    "composition": _check_composition,
    "dr": _check_dr,
}


def _run(ctx, impls, names):
    with ThreadPoolExecutor(max_workers=min(worker_count(), max(1, len(names)))) as pool:
        return list(pool.map(lambda nm: impls[nm](ctx), names))


def _select(requested, available):
    if requested is None:
        return list(available)
    unknown = [c for c in requested if c not in available]
    if unknown:
        raise ValueError(f"unknown checks: {', '.join(unknown)}")
    return [c for c in available if c in requested]


def identity_suite(patch: imm.GraphPatch, checks: Optional[Sequence[str]] = None,
                   assume_translator: Optional[bool] = None, layer: int = 2,
                   shape: Optional[imm.ShapeData] = None) -> DiagnosticsReport:
    """Evaluate the identity checks on the interior nodes of ``patch``.

    Translator-only checks run when the translator residual is below the gate
    ``max(1e-8, C h^2 scale)`` or when ``assume_translator`` is true. If the
    patch is not a translator and translator-only checks were requested by
    name, :class:`NotATranslatorError` is raised; with ``checks=None`` only the
    definition-level checks are run.
    """
    shape = shape or imm.second_fundamental_form(patch)
    is_tr, res, gate = translator_gate(patch, shape)
    names = _select(checks, IDENTITY_CHECKS)
    treat = is_tr if assume_translator is None else assume_translator
    if not treat:
        wanted = [c for c in names if c in TRANSLATOR_ONLY]
        if checks is not None and wanted:
            raise NotATranslatorError(
                f"patch is not a translator (residual {res:.3e} > {gate:.3e}); "
                f"requested translator-only checks: {', '.join(wanted)}")
        names = [c for c in names if c in DEFINITION_LEVEL]
    ctx = _Context(patch, shape, imm.interior_mask(patch.shape, layer), layer)
    results = _run(ctx, _IDENTITY_IMPL, names)
    results = [r for r in results if not (r.name == "w_identity_flat" and r.nodes_evaluated == 0
                                          and checks is None)]
    flat, worst, limit = is_flat_normal_bundle(patch, shape, ctx.mask)
    notes = {"translator_residual": res, "translator_gate": gate, "treated_as_translator": bool(treat),
             "normal_bundle_flat": bool(flat), "normal_curvature_max": worst}
    return DiagnosticsReport(results, grid_info(patch), {"patch": patch_digest(patch)}, {}, notes)


# -- inequalities ------------------------------------------------------------

def simons_constant(patch, shape=None, mask=None) -> int:
    shape = shape or imm.second_fundamental_form(patch)
    return 2 if is_flat_normal_bundle(patch, shape, mask)[0] else 3


def _v_field(ctx):
    w = imm.w_function(ctx.patch, ctx.shape, ctx.reference)
    with np.errstate(divide="ignore"):
        return np.where(w > 0, 1.0 / w, np.inf)


def _check_simons(ctx, k):
    p, s = ctx.patch, ctx.shape
    B2 = s.B_norm_sq
    lhs = imm.drift_laplacian(p, B2, s)
    grad_sq = imm.gradient_norm_sq(p, B2, s)
    with np.errstate(divide="ignore", invalid="ignore"):
        grad_norm_sq = np.where(B2 > 1e-300, grad_sq / (4.0 * B2), 0.0)
    rhs = 2.0 * grad_norm_sq - k * B2 ** 2
    chk = _slack("simons", ANCHORS["simons"], lhs, rhs, ctx.mask, p)
    return chk


def _check_nv(ctx):
    p, s = ctx.patch, ctx.shape
    v = _v_field(ctx)
    usable = ctx.mask & np.isfinite(v)
    if not np.all(np.isfinite(v)):
        usable &= False
        lhs = np.zeros(p.shape)
    else:
        lhs = v ** 4 * s.B_norm_sq
    grad = imm.gradient_norm_sq(p, np.where(np.isfinite(v), v, 0.0), s)
    return _slack("nv", ANCHORS["nv"], lhs, grad, usable, p, int(ctx.mask.sum() - usable.sum()))


def _check_propv_h(ctx):
    p, s = ctx.patch, ctx.shape
    v = _v_field(ctx)
    inside = v < 2.0 - V_MARGIN
    hv = np.full(p.shape, np.nan)
    hv[inside] = h_function(v[inside])
    with np.errstate(invalid="ignore"):
        lh = imm.drift_laplacian(p, hv, s)
    usable = ctx.mask & inside & np.isfinite(lh)
    hv0 = np.where(np.isfinite(hv), hv, 0.0)
    return _slack("propv_h", ANCHORS["propv_h"], np.where(usable, lh, 0.0), 3.0 * hv0 * s.B_norm_sq,
                  usable, p, int(ctx.mask.sum() - usable.sum()))


def _check_propv_v(ctx):
    p, s = ctx.patch, ctx.shape
    v = _v_field(ctx)
    inside = v <= 3.0 - V_MARGIN
    vv = np.where(np.isfinite(v), v, np.nan)
    with np.errstate(invalid="ignore"):
        lv = imm.drift_laplacian(p, vv, s)
    usable = ctx.mask & inside & np.isfinite(lv)
    return _slack("propv_v", ANCHORS["propv_v"], np.where(usable, lv, 0.0), 0.0, usable, p,
                  int(ctx.mask.sum() - usable.sum()))


def k0_estimate(patch, shape=None, layer: int = 2, b0: Optional[float] = None,
                min_curvature: float = 1e-8) -> dict:
    """Empirical inf of L v / |B|^2 over nodes with v <= b0 (reported, not asserted)."""
    shape = shape or imm.second_fundamental_form(patch)
    ctx = _Context(patch, shape, imm.interior_mask(patch.shape, layer), layer)
    v = _v_field(ctx)
    if not np.all(np.isfinite(v)):
        return {"K0": None, "b0": b0, "nodes": 0}
    lv = imm.drift_laplacian(patch, v, shape)
    cap = 3.0 - V_MARGIN if b0 is None else b0
    usable = ctx.mask & (v <= cap) & (shape.B_norm_sq > min_curvature)
    if not usable.any():
        return {"K0": None, "b0": b0, "nodes": 0}
    ratio = lv[usable] / shape.B_norm_sq[usable]
    return {"K0": float(ratio.min()), "b0": float(v[usable].max()) if b0 is None else b0,
            "nodes": int(usable.sum())}


def inequality_suite(patch: imm.GraphPatch, checks: Optional[Sequence[str]] = None,
                     layer: int = 2, k: Optional[int] = None,
                     shape: Optional[imm.ShapeData] = None) -> DiagnosticsReport:
    """Simons-type, gradient and Gauss-image inequalities as slack checks.

    ``k`` defaults to 2 for m = 1 or a numerically flat normal bundle, else 3.
    """
    shape = shape or imm.second_fundamental_form(patch)
    mask = imm.interior_mask(patch.shape, layer)
    ctx = _Context(patch, shape, mask, layer)
    flat, worst, limit = is_flat_normal_bundle(patch, shape, mask)
    k = k if k is not None else (2 if flat else 3)
    impls = {
        "simons": lambda c: _check_simons(c, k),
        "nv": _check_nv,
        "propv_h": _check_propv_h,
        "propv_v": _check_propv_v,
    }
    names = _select(checks, INEQUALITY_CHECKS)
    results = _run(ctx, impls, names)
    notes = {"simons_k": k, "normal_bundle_flat": bool(flat), "normal_curvature_max": worst,
             "normal_curvature_limit": limit}
    return DiagnosticsReport(results, grid_info(patch), {"patch": patch_digest(patch)},
                             {"K0": k0_estimate(patch, shape, layer)}, notes)


def full_report(patch, checks=None, assume_translator=None, config: Optional[dict] = None):
    """Identity and inequality suites merged, with provenance hashes."""
    shape = imm.second_fundamental_form(patch)
    id_names = None if checks is None else [c for c in checks if c in IDENTITY_CHECKS]
    in_names = None if checks is None else [c for c in checks if c in INEQUALITY_CHECKS]
    if checks is not None:
        unknown = [c for c in checks if c not in IDENTITY_CHECKS + INEQUALITY_CHECKS]
        if unknown:
            raise ValueError(f"unknown checks: {', '.join(unknown)}")
    rep = DiagnosticsReport([], grid_info(patch))
    if id_names is None or id_names:
        rep = rep.merge(identity_suite(patch, id_names, assume_translator, shape=shape))
    if in_names is None or in_names:
        rep = rep.merge(inequality_suite(patch, in_names, shape=shape))
    rep.provenance["patch"] = patch_digest(patch)
    rep.provenance["config"] = config_digest(config or {})
    return rep


# -- variational checks ------------------------------------------------------

def _immersed_weighted_volume(patch, X) -> float:
    """F(X) = int exp(<V, X>) dmu for an immersion sampled on the patch grid."""
    T = imm._fd_apply(X, patch.spacing, imm.gradient)  # (..., N, n)
    g = np.einsum("...Ki,...Kj->...ij", T, T)
    dens = np.exp(X @ patch.V) * np.sqrt(np.linalg.det(g))
    return imm.integrate(patch, dens)


def _require_compact(patch, phi, layer=2):
    phi = np.asarray(phi, dtype=float)
    collar = ~imm.interior_mask(patch.shape, layer)
    top = float(np.abs(phi).max())
    if top > 0 and float(np.abs(phi[collar]).max()) > 1e-14 * top:
        raise ValueError("phi must vanish on the boundary collar")
    return phi


@dataclass(frozen=True)
class SecondVariation:
    fd_value: float
    formula_value: float
    rel_err: float
    first_variation: float
    weighted_volume: float


def second_variation_check(patch, phi, delta: float = 1e-3) -> SecondVariation:
    """Second difference of F along X + s phi nu against -int phi J phi exp(f)."""
    if patch.m != 1:
        raise ValueError("second_variation_check needs codimension one")
    phi = _require_compact(patch, phi)
    s = imm.second_fundamental_form(patch)
    nu = s.normals[..., 0, :]
    X = s.position
    F = {t: _immersed_weighted_volume(patch, X + t * phi[..., None] * nu) for t in (-delta, 0.0, delta)}
    fd = (F[delta] - 2.0 * F[0.0] + F[-delta]) / delta**2
    first = (F[delta] - F[-delta]) / (2.0 * delta)
    weight = np.exp(X @ patch.V) * s.sqrt_det_g
    jphi = imm.drift_laplacian(patch, phi, s) + s.B_norm_sq * phi
    formula = -imm.integrate(patch, phi * jphi * weight)
    denom = max(abs(formula), abs(fd))
    rel = abs(fd - formula) / denom if denom > 0 else 0.0
    return SecondVariation(float(fd), float(formula), float(rel), float(first), float(F[0.0]))


def bump(t):
    """exp(-1/(1 - t^2)) on |t| < 1, zero outside."""
    t = np.asarray(t, dtype=float)
    out = np.zeros(t.shape)
    inside = np.abs(t) < 1
    out[inside] = np.exp(-1.0 / (1.0 - t[inside] ** 2))
    return out


def _local_coords(patch, shrink):
    """Coordinates rescaled so the shrunken box maps to [-1, 1]^n."""
    out = []
    for i, (a, b) in enumerate(patch.domain):
        c, r = 0.5 * (a + b), 0.5 * (b - a) * shrink
        out.append((patch.coords[..., i] - c) / r)
    return out


def random_test_function(patch, rng, modes: int = 4, shrink: float = 0.9) -> np.ndarray:
    """Bump cutoff times a random trigonometric polynomial."""
    t = _local_coords(patch, shrink)
    cutoff = np.ones(patch.shape)
    for ti in t:
        cutoff = cutoff * bump(ti)
    poly = np.full(patch.shape, rng.normal())
    for i, ti in enumerate(t):
        for k in range(1, modes + 1):
            a, b = rng.normal(size=2) / k
            poly = poly + a * np.cos(k * math.pi * ti) + b * np.sin(k * math.pi * ti)
    return cutoff * poly


def rayleigh_quotient(patch, phi, shape=None) -> float:
    """int phi (-L phi - |B|^2 phi) e^f / int phi^2 e^f."""
    shape = shape or imm.second_fundamental_form(patch)
    weight = np.exp(shape.position @ patch.V) * shape.sqrt_det_g
    jphi = -imm.drift_laplacian(patch, phi, shape) - shape.B_norm_sq * phi
    return imm.integrate(patch, phi * jphi * weight) / imm.integrate(patch, phi * phi * weight)


@dataclass(frozen=True)
class ProbeResult:
    minimum: float
    values: tuple


def stability_rayleigh_probe(patch, trials: int = 100, seed: int = 42) -> ProbeResult:
    if patch.m != 1:
        raise ValueError("the stability probe needs codimension one")
    shape = imm.second_fundamental_form(patch)
    rng = np.random.default_rng(seed)
    vals = tuple(float(rayleigh_quotient(patch, random_test_function(patch, rng), shape))
                 for _ in range(trials))
    return ProbeResult(min(vals), vals)


def random_competitor(patch, rng, modes: int = 5) -> np.ndarray:
    """Random sine series vanishing on the boundary, normalised to max |psi| = 1."""
    psi = np.zeros(patch.shape)
    ks = np.stack(np.meshgrid(*[np.arange(1, modes + 1)] * patch.n, indexing="ij"), -1).reshape(-1, patch.n)
    for kvec in ks:
        term = np.ones(patch.shape)
        for i, (a, b) in enumerate(patch.domain):
            term = term * np.sin(kvec[i] * math.pi * (patch.coords[..., i] - a) / (b - a))
        psi += rng.normal() / float(np.prod(kvec)) * term
    for i in range(patch.n):
        idx = [slice(None)] * patch.n
        for end in (0, -1):
            idx[i] = end
            psi[tuple(idx)] = 0.0
    return psi / np.abs(psi).max()


@dataclass(frozen=True)
class CompetitorResult:
    min_gap: float
    gaps: tuple
    amplitudes: tuple
    reference_volume: float

    @property
    def all_positive(self) -> bool:
        return all(g > 0 for g, a in zip(self.gaps, self.amplitudes) if a > 0)


def minimality_competitor_test(patch, trials: int = 200, amplitude: float = 0.1,
                               seed: int = 42) -> CompetitorResult:
    """Relative gaps (F(graph(u + psi)) - F(M)) / F(M) over random competitors."""
    if patch.m != 1 or not np.allclose(patch.V, np.eye(patch.n + 1)[-1]):
        raise ValueError("the competitor test needs m = 1 and V = eps_(n+1)")
    rng = np.random.default_rng(seed)
    F0 = imm.weighted_volume(patch)
    gaps, amps = [], []
    for _ in range(trials):
        amp = amplitude * rng.uniform(0.1, 1.0)
        psi = amp * random_competitor(patch, rng)
        gaps.append((imm.weighted_volume(patch.with_u(patch.u[..., 0] + psi)) - F0) / F0)
        amps.append(amp)
    return CompetitorResult(float(min(gaps)), tuple(float(g) for g in gaps), tuple(amps), float(F0))


def competitor_gap_exponent(patch, amplitudes: Sequence[float] = (0.1, 0.05, 0.025, 0.0125),
                            seed: int = 42) -> float:
    """Slope of log gap against log amplitude for one fixed competitor shape."""
    rng = np.random.default_rng(seed)
    psi = random_competitor(patch, rng)
    F0 = imm.weighted_volume(patch)
    gaps = [imm.weighted_volume(patch.with_u(patch.u[..., 0] + a * psi)) - F0 for a in amplitudes]
    if min(gaps) <= 0:
        raise ValueError("non-positive gap; cannot fit an exponent")
    return float(np.polyfit(np.log(amplitudes), np.log(gaps), 1)[0])


# -- volume growth -----------------------------------------------------------

@dataclass(frozen=True)
class GrowthProfile:
    radii: tuple
    volumes: tuple
    ratios: tuple
    monotone: bool
    worst_drop: float
    truncated: bool
    inscribed_radius: float

    def rows(self):
        return list(zip(self.radii, self.volumes, self.ratios))


def _partial_volume_1d(rho, dens, x, R):
    """int over {rho < R} of dens dx with rho and dens linear on each cell."""
    total = 0.0
    for k in range(len(x) - 1):
        r0, r1 = rho[k], rho[k + 1]
        d0, d1_ = dens[k], dens[k + 1]
        dx = x[k + 1] - x[k]
        if r0 < R and r1 < R:
            total += 0.5 * (d0 + d1_) * dx
        elif r0 < R or r1 < R:
            t = (R - r0) / (r1 - r0)  # crossing parameter in (0, 1)
            if r0 < R:
                dm = d0 + t * (d1_ - d0)
                total += 0.5 * (d0 + dm) * t * dx
            else:
                dm = d0 + t * (d1_ - d0)
                total += 0.5 * (dm + d1_) * (1 - t) * dx
    return total


def _distance_on_patch(patch, origin, fm_nodes: int, pad: float):
    X = patch.position
    lo = X.reshape(-1, X.shape[-1]).min(axis=0)
    hi = X.reshape(-1, X.shape[-1]).max(axis=0)
    extent = float((hi - lo).max())
    lo = lo - pad * extent
    hi = hi + pad * extent
    step = extent / fm_nodes
    shape = tuple(int(math.ceil((hi[k] - lo[k]) / step)) + 1 for k in range(lo.size))
    hi = lo + step * (np.array(shape) - 1)
    field_ = conformal_distance(origin, lo, hi, shape, patch.n, patch.V)
    return field_(X)


def volume_growth_profile(patch, origin=None, rho_steps: int = 20, rho_max: Optional[float] = None,
                          slack: float = 1e-3, fm_nodes: int = 600, pad: float = 0.25) -> GrowthProfile:
    """vol(D(rho)) / rho^n with rho the conformal ambient distance from ``origin``.

    ``origin`` defaults to the patch point over the centre node. The volume is
    the induced conformal volume, i.e. the weighted volume exp(<V, X>) dmu.
    """
    X = patch.position
    N = X.shape[-1]
    if N > 3:
        raise ValueError("volume growth needs ambient dimension <= 3")
    if origin is None:
        origin = X[tuple(s // 2 for s in patch.shape)]
    origin = np.asarray(origin, dtype=float)
    gap = float(np.linalg.norm(X - origin, axis=-1).min())
    if gap > 2 * max(patch.spacing) * math.sqrt(N):
        raise ValueError("origin does not lie on the patch")
    rho = _distance_on_patch(patch, origin, fm_nodes, pad)
    boundary = ~imm.interior_mask(patch.shape, 1)
    inscribed = float(rho[boundary].min())
    truncated = False
    if rho_max is None:
        rho_max = 0.95 * inscribed
    elif rho_max > inscribed:
        truncated = True
        rho_max = inscribed
    shape = imm.induced_metric(patch)
    dens = np.exp(X @ patch.V) * shape.sqrt_det_g
    radii = [rho_max * (k + 1) / rho_steps for k in range(rho_steps)]
    vols = []
    for R in radii:
        if patch.n == 1:
            vols.append(_partial_volume_1d(rho, dens, patch.axes[0], R))
        else:
            vols.append(imm.integrate(patch, np.where(rho < R, dens, 0.0)))
    ratios = [v / R ** patch.n for v, R in zip(vols, radii)]
    drops = [max(0.0, (ratios[k] - ratios[k + 1]) / ratios[k]) for k in range(len(ratios) - 1)
             if ratios[k] > 0]
    worst = max(drops, default=0.0)
    return GrowthProfile(tuple(radii), tuple(vols), tuple(ratios), worst <= slack, worst, truncated,
                         inscribed)


# -- Omori-Yau probe ---------------------------------------------------------

@dataclass(frozen=True)
class OmoriYauRecord:
    epsilon: float
    node: tuple
    value: float
    grad_norm: float
    drift_laplacian: float
    at_base: bool


@dataclass(frozen=True)
class OmoriYauReport:
    records: tuple
    trend_ok: bool
    hypothesis_violation: bool


def omori_yau_probe(patch, f, epsilons: Sequence[float], base=None, slack: float = 0.1,
                    layer: int = 2) -> OmoriYauReport:
    """Grid maximisers of f - eps r and the size of grad f and L f there.

    The trend verdict asks |grad f| at the maximiser to be nonincreasing (up
    to the relative ``slack``) as eps decreases; maximisers at the base point,
    where r is not differentiable, are left out of the trend.
    ``hypothesis_violation`` flags an f that does not look sublinear: f/r at
    the far end of the patch is at least 0.9 times f/r at half that radius.
    """
    eps = list(epsilons)
    if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("epsilons must be positive and decreasing")
    X = patch.position
    if base is None:
        base = X[tuple(s // 2 for s in patch.shape)]
    base = np.asarray(base, dtype=float)
    f = np.asarray(f, dtype=float)
    shape = imm.second_fundamental_form(patch)
    r = imm.extrinsic_radius(patch, base)
    grad = np.sqrt(imm.gradient_norm_sq(patch, f, shape))
    lf = imm.drift_laplacian(patch, f, shape)
    mask = imm.interior_mask(patch.shape, layer)
    base_node = np.unravel_index(int(np.argmin(np.where(mask, r, np.inf))), patch.shape)
    records = []
    for e in eps:
        score = np.where(mask, f - e * r, -np.inf)
        node = np.unravel_index(int(np.argmax(score)), patch.shape)
        records.append(OmoriYauRecord(float(e), tuple(int(i) for i in node), float(f[node]),
                                      float(grad[node]), float(lf[node]), node == base_node))
    usable = [rec.grad_norm for rec in records if not rec.at_base]
    trend = all(b <= a * (1 + slack) + 1e-12 for a, b in zip(usable, usable[1:]))
    rmax = float(r[mask].max())
    far = mask & (r >= 0.95 * rmax)
    mid = mask & (np.abs(r - 0.5 * rmax) <= 0.05 * rmax)
    violation = False
    if far.any() and mid.any():
        ratio_far = float(np.mean(f[far] / r[far]))
        ratio_mid = float(np.mean(f[mid] / r[mid]))
        violation = ratio_mid > 0 and ratio_far >= 0.9 * ratio_mid
    return OmoriYauReport(tuple(records), trend, violation)


# -- curvature estimate ------------------------------------------------------

@dataclass(frozen=True)
class CurvatureEstimate:
    radii: tuple
    maxima: tuple
    exponent: Optional[float]
    zero_function: bool
    h2_below_3: bool
    max_h: float


def curvature_estimate_probe(patch, radii: Sequence[float], h2: float, base=None,
                             layer: int = 2) -> CurvatureEstimate:
    """max over D_a of (a^2 - r^2)^2 |B|^2 / (h2 - h)^2 and its log-log slope in a.

    ``D_a`` is the set of interior nodes with extrinsic distance r < a from
    ``base``; h is the auxiliary function of v, which must stay below 2.
    """
    radii = sorted(float(a) for a in radii)
    X = patch.position
    if base is None:
        base = X[tuple(s // 2 for s in patch.shape)]
    shape = imm.second_fundamental_form(patch)
    r = imm.extrinsic_radius(patch, base)
    mask = imm.interior_mask(patch.shape, layer)
    w = imm.w_function(patch, shape)
    largest = mask & (r < radii[-1])
    if np.any(w[largest] <= 0):
        raise ValueError("Gauss image leaves the domain w > 0")
    v = 1.0 / w[largest]
    if np.any(v >= 2.0):
        raise ValueError("v reaches 2 on the largest domain; h is undefined")
    hv = np.full(patch.shape, np.nan)
    hv[largest] = h_function(v)
    max_h = float(np.nanmax(hv))
    if max_h >= h2:
        raise ValueError(f"h reaches {max_h:.4g} >= h2 = {h2}")
    maxima = []
    for a in radii:
        dom = mask & (r < a)
        f = (a * a - r[dom] ** 2) ** 2 * shape.B_norm_sq[dom] / (h2 - hv[dom]) ** 2
        maxima.append(float(f.max()) if f.size else 0.0)
    zero = all(mx == 0.0 for mx in maxima)
    exponent = None
    if not zero and min(maxima) > 0:
        exponent = float(np.polyfit(np.log(radii), np.log(maxima), 1)[0])
    return CurvatureEstimate(tuple(radii), tuple(maxima), exponent, zero, h2 < 3.0, max_h)


def sobolev_threshold(n: int, k: int, kappa: float) -> float:
    """sqrt(4 (n - 1) / (k n^2 kappa))."""
    if n < 2:
        raise ValueError("the Sobolev threshold needs n >= 2")
    if k not in (2, 3):
        raise ValueError("k must be 2 or 3")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return math.sqrt(4.0 * (n - 1) / (k * n * n * kappa))
