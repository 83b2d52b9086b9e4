"""Conformance diagnostics of the hybrid gradient discretisation.

The discrete norm combines the matrix gradient, the tangential fracture
gradient, and the two-sided interface jumps,

    ``|v|^2 = |grad_m v|^2 + |grad_f v|^2 + sum_sides |jump_s v|^2``,

and every diagnostic here is an extremal ratio against that norm:

* ``coercivity_estimate`` -- the largest ratio of the summed value
  reconstructions to the norm, reported as a bracket around the
  sum-of-norms ratio (the squared-sum surrogate is a Rayleigh quotient,
  the sum itself is not);
* ``consistency_defect`` -- the interpolation defect of a smooth field,
  minimized over the dof space through the normal equations of the
  least-squares functional;
* ``limit_conformity_defect`` -- the dual norm of the discrete
  integration-by-parts functional of a smooth flux;
* ``compactness_translate_estimate`` -- Rayleigh quotients of translate
  differences with zero extension outside the domains;
* ``dual_norm_time_derivative`` -- the dual norm of the stored-amount
  increment functional between two states.

Smooth input fields are single-valued callables on position arrays; the
diagnostics sample them with fixed quadrature rules (piecewise-constant
factors are integrated exactly, gradients by midpoint per sub-triangle).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .gd import (
    FractureLocator,
    GradientDiscretisation,
    PointLocator,
    gram_matrix,
    segment_quadrature,
    triangle_quadrature,
)
from .mesh import side_geometry

__all__ = [
    "CoercivityEstimate",
    "ConsistencyDefect",
    "DiagnosticsError",
    "GDNormCache",
    "LimitConformityDefect",
    "coercivity_estimate",
    "compactness_translate_estimate",
    "consistency_defect",
    "consistency_defect_at",
    "dual_norm_functional",
    "dual_norm_time_derivative",
    "gd_norm",
    "generalized_max_eigenvalue",
    "limit_conformity_defect",
    "translate_difference_blocks",
]

_TINY = 1e-300


class DiagnosticsError(RuntimeError):
    """A diagnostic computation could not be completed."""


# ---------------------------------------------------------------------------
# norm cache


class GDNormCache:
    """Gram matrix of the discrete norm with a factorization handle.

    ``dirichlet`` marks constrained dofs (their values are zero in the
    reduced space).  On the full dof space the quadratic form is a
    seminorm -- constants lie in its kernel -- while the reduced matrix
    ``A`` is positive definite whenever the constrained set breaks every
    constant, which is what makes the Rayleigh quotients and dual norms
    below well defined.
    """

    def __init__(self, gd: GradientDiscretisation, dirichlet=None):
        self.gd = gd
        if dirichlet is None:
            dirichlet = np.zeros(gd.n_dofs, dtype=bool)
        self.dirichlet = np.array(dirichlet, dtype=bool, copy=True)
        if self.dirichlet.shape != (gd.n_dofs,):
            raise ValueError(
                f"dirichlet mask size mismatch: {self.dirichlet.shape} for "
                f"{gd.n_dofs} dofs")
        self.free = np.flatnonzero(~self.dirichlet)
        self.A_full = gram_matrix(gd)
        self.A = self.A_full[self.free][:, self.free].tocsc()
        self._lu = None
        self._locator = None
        self._sides = None

    @property
    def n_free(self) -> int:
        return self.free.size

    def reduce(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v, dtype=float)[self.free]

    def expand(self, v_free: np.ndarray) -> np.ndarray:
        out = np.zeros(self.gd.n_dofs)
        out[self.free] = v_free
        return out

    def solve(self, r_free: np.ndarray) -> np.ndarray:
        if self._lu is None:
            self._lu = splu(self.A)
        return self._lu.solve(np.asarray(r_free, dtype=float))

    def norm_free(self, v_free: np.ndarray) -> float:
        v_free = np.asarray(v_free, dtype=float)
        return math.sqrt(max(float(v_free @ (self.A @ v_free)), 0.0))

    @property
    def locator(self) -> PointLocator:
        if self._locator is None:
            self._locator = PointLocator(self.gd)
        return self._locator

    @property
    def sides(self):
        if self._sides is None:
            self._sides = side_geometry(self.gd.mesh)
        return self._sides


def gd_norm(cache: GDNormCache, v: np.ndarray) -> float:
    """Discrete norm of ``v``: full-length vectors are measured by the
    full (semi)norm, reduced-length vectors by the definite reduced form."""
    v = np.asarray(v, dtype=float)
    if v.shape == (cache.gd.n_dofs,):
        return math.sqrt(max(float(v @ (cache.A_full @ v)), 0.0))
    if v.shape == (cache.n_free,):
        return cache.norm_free(v)
    raise ValueError(
        f"dof vector size mismatch: got {v.shape}, expected "
        f"({cache.gd.n_dofs},) or ({cache.n_free},)")


# ---------------------------------------------------------------------------
# generalized eigenvalue machinery


def generalized_max_eigenvalue(B, A=None, *, solve=None, tol=1e-10,
                               max_iters=100_000, seed=0):
    """Largest eigenvalue of ``B v = lam A v`` for symmetric positive
    semidefinite ``B`` and positive definite ``A``.

    Power iteration on ``A^{-1} B`` with the generalized Rayleigh
    quotient; acceptance requires the residual certificate
    ``|B x - lam A x|_{A^{-1}} <= tol * lam``, which bounds the distance
    to the nearest eigenvalue.  ``B`` may be a matrix or a matvec
    callable (then ``A`` is required for the dimension); ``solve`` is an
    optional prefactored solver for ``A``.  Returns ``(lam, vector)``
    with the vector normalized in the ``A`` inner product.
    """
    if callable(B):
        if A is None:
            raise ValueError("a matrix A is required with a callable B")
        b_op = B
    elif sp.issparse(B):
        B_csr = B.tocsr()
        b_op = B_csr.__matmul__
    else:
        B_arr = np.asarray(B, dtype=float)
        b_op = B_arr.__matmul__

    if A is None:
        n = B.shape[0]
        a_op = None
        a_solve = solve
    elif sp.issparse(A):
        n = A.shape[0]
        A_csr = A.tocsr()
        a_op = A_csr.__matmul__
        if solve is None:
            lu = splu(A.tocsc())
            a_solve = lu.solve
        else:
            a_solve = solve
    else:
        A_arr = np.asarray(A, dtype=float)
        n = A_arr.shape[0]
        a_op = A_arr.__matmul__
        if solve is None:
            factor = scipy.linalg.cho_factor(A_arr)
            a_solve = lambda x: scipy.linalg.cho_solve(factor, x)
        else:
            a_solve = solve
    if a_op is None:
        a_op = lambda x: x
    if a_solve is None:
        a_solve = lambda x: x

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x = x / math.sqrt(float(x @ a_op(x)))
    lam_prev = math.inf
    for _ in range(max_iters):
        y = b_op(x)
        lam = max(float(x @ y), 0.0)
        if lam == 0.0 and float(np.abs(y).max(initial=0.0)) == 0.0:
            return 0.0, x
        if abs(lam - lam_prev) <= 0.01 * tol * max(lam, _TINY):
            res = y - lam * a_op(x)
            err = float(res @ a_solve(res))
            if err <= (tol * max(lam, _TINY)) ** 2:
                return lam, x
        lam_prev = lam
        z = a_solve(y)
        nz2 = float(z @ a_op(z))
        if nz2 <= 0.0:
            return lam, x
        x = z / math.sqrt(nz2)
    raise DiagnosticsError(
        f"generalized eigenvalue iteration did not converge "
        f"in {max_iters} iterations")


@dataclass(frozen=True)
class CoercivityEstimate:
    """Bracket for the largest value-to-norm reconstruction ratio.

    ``lam_sqrt`` is the exact maximum of the squared-sum surrogate ratio;
    the sum-of-norms ratio lies in ``[low, high] = [lam_sqrt,
    sqrt(n_terms) * lam_sqrt]`` by norm equivalence on the summands.
    """

    lam_sqrt: float
    low: float
    high: float
    n_terms: int


def coercivity_estimate(cache: GDNormCache, *, tol=1e-10, max_iters=100_000,
                        seed=0) -> CoercivityEstimate:
    """Largest ratio of the summed value reconstructions to the norm."""
    gd = cache.gd
    diag = (gd.vol_m + gd.vol_f + gd.vol_a)[cache.free]
    B = sp.diags(diag).tocsr()
    lam, _ = generalized_max_eigenvalue(B, cache.A, solve=cache.solve,
                                        tol=tol, max_iters=max_iters,
                                        seed=seed)
    n_terms = 1 + ((1 + gd.n_sides) if gd.n_he else 0)
    root = math.sqrt(max(lam, 0.0))
    return CoercivityEstimate(lam_sqrt=root, low=root,
                              high=math.sqrt(n_terms) * root,
                              n_terms=n_terms)


# ---------------------------------------------------------------------------
# consistency defect


@dataclass(frozen=True)
class ConsistencyDefect:
    """Six-term interpolation defect: value is the sum of the parts."""

    value: float
    parts: dict
    minimizer: np.ndarray


def _consistency_system(cache, u_m, grad_u_m, u_f, grad_u_f, reconstruction,
                        degree):
    """Least-squares rows of the defect terms: ``E v - b`` holds, per row,
    one quadrature sample of a defect integrand times its sqrt-weight."""
    if reconstruction not in ("piecewise", "p1"):
        raise ValueError(f"unknown reconstruction {reconstruction!r}")
    gd = cache.gd
    colmap = np.full(gd.n_dofs, -1, dtype=np.int64)
    colmap[cache.free] = np.arange(cache.n_free)

    rows_i, cols_i, vals_i, rhs_blocks = [], [], [], []
    groups = {}
    offset = 0

    def open_block(name, n_rows, rhs_block):
        nonlocal offset
        groups[name] = slice(offset, offset + n_rows)
        rhs_blocks.append(np.asarray(rhs_block, dtype=float))
        first = offset
        offset += n_rows
        return first

    def put(row_ids, dofs, coeffs):
        c = colmap[dofs]
        keep = c >= 0
        rows_i.append(row_ids[keep])
        cols_i.append(c[keep])
        vals_i.append(np.asarray(coeffs, dtype=float)[keep])

    # matrix gradient defect, midpoint per sub-triangle
    cent = gd.sub_vertices.mean(axis=1)
    g_t = grad_u_m(cent)
    sw = np.sqrt(gd.sub_area)
    first = open_block("gradient_matrix", 2 * gd.n_sub,
                       (sw[:, None] * g_t).ravel())
    base = first + 2 * np.arange(gd.n_sub)
    for k in range(3):
        for d in range(2):
            put(base + d, gd.sub_dofs[:, k], sw * gd.sub_grads[:, k, d])

    nfe = len(gd.fe_length)
    if nfe:
        # tangential fracture gradient defect, midpoint per edge
        p0 = gd.dof_pos[gd.fe_dofs[:, 0]]
        p1 = gd.dof_pos[gd.fe_dofs[:, 1]]
        swl = np.sqrt(gd.fe_length)
        target = np.einsum("ed,ed->e", grad_u_f(0.5 * (p0 + p1)),
                           gd.fe_tangent)
        first = open_block("gradient_fracture", nfe, swl * target)
        rid = first + np.arange(nfe)
        put(rid, gd.fe_dofs[:, 1], swl / gd.fe_length)
        put(rid, gd.fe_dofs[:, 0], -swl / gd.fe_length)

    # matrix value defect
    lam, wq = triangle_quadrature(degree)
    if reconstruction == "piecewise":
        npc = len(gd.piece_area)
        rhs, rids, dofs, coeffs = [], [], [], []
        first = open_block("value_matrix", npc * len(wq), [])
        for q in range(len(wq)):
            x = np.einsum("j,pjd->pd", lam[q], gd.piece_vertices)
            w = np.sqrt(wq[q] * gd.piece_area)
            rid = first + q * npc + np.arange(npc)
            put(rid, gd.piece_dof, w)
            rhs.append(w * u_m(x))
        rhs_blocks[-1] = np.concatenate(rhs)
    else:
        ns = gd.n_sub
        rhs = []
        first = open_block("value_matrix", ns * len(wq), [])
        for q in range(len(wq)):
            x = np.einsum("j,sjd->sd", lam[q], gd.sub_vertices)
            w = np.sqrt(wq[q] * gd.sub_area)
            rid = first + q * ns + np.arange(ns)
            for k in range(3):
                put(rid, gd.sub_dofs[:, k], w * lam[q, k])
            rhs.append(w * u_m(x))
        rhs_blocks[-1] = np.concatenate(rhs)

    ts, tw = segment_quadrature(max(degree, 2))
    nhe = gd.n_he
    if nhe:
        # fracture value defect
        rhs = []
        if reconstruction == "piecewise":
            first = open_block("value_fracture", nhe * len(tw), [])
            for q in range(len(tw)):
                x = gd.he_pts[:, 0] + ts[q] * (gd.he_pts[:, 1] - gd.he_pts[:, 0])
                w = np.sqrt(tw[q] * gd.he_length)
                rid = first + q * nhe + np.arange(nhe)
                put(rid, gd.he_frac_dof, w)
                rhs.append(w * u_f(x))
        else:
            first = open_block("value_fracture", nfe * len(tw), [])
            for q in range(len(tw)):
                x = p0 + ts[q] * (p1 - p0)
                w = np.sqrt(tw[q] * gd.fe_length)
                rid = first + q * nfe + np.arange(nfe)
                put(rid, gd.fe_dofs[:, 0], w * (1.0 - ts[q]))
                put(rid, gd.fe_dofs[:, 1], w * ts[q])
                rhs.append(w * u_f(x))
        rhs_blocks[-1] = np.concatenate(rhs)

        # jump and trace defects per half-edge and side
        for name in ("jump", "trace"):
            rhs = []
            first = open_block(name, 2 * nhe * len(tw), [])
            for s in range(2):
                tdof = gd.he_trace_dof[:, s]
                for q in range(len(tw)):
                    x = gd.he_pts[:, 0] + ts[q] * (gd.he_pts[:, 1]
                                                   - gd.he_pts[:, 0])
                    w = np.sqrt(tw[q] * gd.he_length)
                    rid = (first + (s * len(tw) + q) * nhe + np.arange(nhe))
                    put(rid, tdof, w)
                    if name == "jump":
                        put(rid, gd.he_frac_dof, -w)
                        rhs.append(w * (u_m(x) - u_f(x)))
                    else:
                        rhs.append(w * u_m(x))
            rhs_blocks[-1] = np.concatenate(rhs)

    E = sp.coo_matrix(
        (np.concatenate(vals_i),
         (np.concatenate(rows_i), np.concatenate(cols_i))),
        shape=(offset, cache.n_free)).tocsr()
    return E, np.concatenate(rhs_blocks), groups


def _solve_normal_equations(E, b):
    """Least-squares solution of ``E v = b`` via the normal equations,
    with two refinement sweeps."""
    E = E.tocsr()
    b = np.asarray(b, dtype=float)
    normal = (E.T @ E).tocsc()
    try:
        lu = splu(normal)
    except RuntimeError as exc:
        raise DiagnosticsError(f"singular normal system: {exc}") from exc
    rhs = E.T @ b
    v = lu.solve(rhs)
    for _ in range(2):
        v += lu.solve(rhs - normal @ v)
    if not np.all(np.isfinite(v)):
        raise DiagnosticsError("singular normal system: non-finite solution")
    return v


def _defect_parts(E, b, groups, v_free):
    r = E @ v_free - b
    parts = {}
    for name, sl in groups.items():
        seg = r[sl]
        parts[name] = math.sqrt(float(seg @ seg))
    return parts


def consistency_defect(cache: GDNormCache, u_m, grad_u_m, u_f=None,
                       grad_u_f=None, *, reconstruction="piecewise",
                       degree=2) -> ConsistencyDefect:
    """Minimal six-term interpolation defect of the smooth field
    ``(u_m, u_f)`` over the constrained dof space.

    ``u_m``/``u_f`` map position arrays to values and must vanish on the
    constrained boundary part; fracture callables default to the matrix
    ones (a field continuous across the fractures).  The quadratic
    defect functional is minimized through its normal equations and the
    six individual defect norms are reported at the minimizer.
    """
    if u_f is None:
        u_f = u_m
    if grad_u_f is None:
        grad_u_f = grad_u_m
    E, b, groups = _consistency_system(cache, u_m, grad_u_m, u_f, grad_u_f,
                                       reconstruction, degree)
    v_free = _solve_normal_equations(E, b)
    parts = _defect_parts(E, b, groups, v_free)
    return ConsistencyDefect(value=sum(parts.values()), parts=parts,
                             minimizer=cache.expand(v_free))


def consistency_defect_at(cache: GDNormCache, v, u_m, grad_u_m, u_f=None,
                          grad_u_f=None, *, reconstruction="piecewise",
                          degree=2) -> ConsistencyDefect:
    """Six-term defect of ``(u_m, u_f)`` at a given dof vector ``v``
    (full length; constrained entries are taken as zero)."""
    if u_f is None:
        u_f = u_m
    if grad_u_f is None:
        grad_u_f = grad_u_m
    v = np.asarray(v, dtype=float)
    if v.shape != (cache.gd.n_dofs,):
        raise ValueError(f"dof vector size mismatch: got {v.shape}")
    E, b, groups = _consistency_system(cache, u_m, grad_u_m, u_f, grad_u_f,
                                       reconstruction, degree)
    parts = _defect_parts(E, b, groups, cache.reduce(v))
    return ConsistencyDefect(value=sum(parts.values()), parts=parts,
                             minimizer=v.copy())


# ---------------------------------------------------------------------------
# limit-conformity defect


@dataclass(frozen=True)
class LimitConformityDefect:
    """Dual norm of the integration-by-parts functional.

    ``value`` uses the refined quadrature, ``value_base`` the base one;
    ``quadrature_flag`` marks a material difference between the two.
    """

    value: float
    value_base: float
    quadrature_flag: bool


def _conformity_functional(gd, q_m, div_q_m, q_f, div_q_f, phis, degree):
    """Assemble ``r[i] = w(e_i)`` and the cancellation-free magnitude
    ``r_abs`` of the assembled contributions."""
    r = np.zeros(gd.n_dofs)
    r_abs = np.zeros(gd.n_dofs)
    lam, wq = triangle_quadrature(degree)

    # matrix gradient term: G_i . int_sub q_m
    Q = np.zeros((gd.n_sub, 2))
    for q in range(len(wq)):
        x = np.einsum("j,sjd->sd", lam[q], gd.sub_vertices)
        Q += wq[q] * np.asarray(q_m(x), dtype=float)
    Q *= gd.sub_area[:, None]
    for k in range(3):
        contrib = np.einsum("sd,sd->s", gd.sub_grads[:, k], Q)
        np.add.at(r, gd.sub_dofs[:, k], contrib)
        np.add.at(r_abs, gd.sub_dofs[:, k], np.abs(contrib))

    # matrix value term: int_piece div q_m
    D = np.zeros(len(gd.piece_area))
    for q in range(len(wq)):
        x = np.einsum("j,pjd->pd", lam[q], gd.piece_vertices)
        D += wq[q] * np.asarray(div_q_m(x), dtype=float)
    D *= gd.piece_area
    np.add.at(r, gd.piece_dof, D)
    np.add.at(r_abs, gd.piece_dof, np.abs(D))

    nhe = gd.n_he
    if not nhe:
        return r, r_abs
    ts, tw = segment_quadrature(degree)

    if q_f is not None:
        # tangential fracture term: (v1 - v0)/L * int_edge q_f . t
        p0 = gd.dof_pos[gd.fe_dofs[:, 0]]
        p1 = gd.dof_pos[gd.fe_dofs[:, 1]]
        I = np.zeros(len(gd.fe_length))
        for q in range(len(tw)):
            x = p0 + ts[q] * (p1 - p0)
            I += tw[q] * np.einsum("ed,ed->e", np.asarray(q_f(x), dtype=float),
                                   gd.fe_tangent)
        # edge length cancels: integral carries L, the slope carries 1/L
        np.add.at(r, gd.fe_dofs[:, 1], I)
        np.add.at(r, gd.fe_dofs[:, 0], -I)
        np.add.at(r_abs, gd.fe_dofs[:, 1], np.abs(I))
        np.add.at(r_abs, gd.fe_dofs[:, 0], np.abs(I))
        if div_q_f is not None:
            Iv = np.zeros(nhe)
            for q in range(len(tw)):
                x = gd.he_pts[:, 0] + ts[q] * (gd.he_pts[:, 1] - gd.he_pts[:, 0])
                Iv += tw[q] * gd.he_length * np.asarray(div_q_f(x), dtype=float)
            np.add.at(r, gd.he_frac_dof, Iv)
            np.add.at(r_abs, gd.he_frac_dof, np.abs(Iv))

    # interface flux term: - int q_m . n_side on the trace reconstruction;
    # the side normal points out of that side's matrix subdomain
    for s in range(2):
        sign = 1.0 if s == 0 else -1.0
        Iq = np.zeros(nhe)
        for q in range(len(tw)):
            x = gd.he_pts[:, 0] + ts[q] * (gd.he_pts[:, 1] - gd.he_pts[:, 0])
            qv = np.asarray(q_m(x), dtype=float)
            Iq += tw[q] * gd.he_length * (
                sign * np.einsum("hd,hd->h", qv, gd.he_normal))
        np.add.at(r, gd.he_trace_dof[:, s], -Iq)
        np.add.at(r_abs, gd.he_trace_dof[:, s], np.abs(Iq))

    if phis is not None:
        # side compensation term against trace - fracture - jump: per
        # half-edge the trace dof collects +1 (trace reconstruction) and
        # -1 (the jump's trace part), the fracture dof -1 (fracture
        # reconstruction) and +1 (the jump's fracture part); cancelling
        # per half-edge keeps the structural zero exact in float
        coef_trace = 1.0 - 1.0
        coef_frac = -1.0 + 1.0
        for s in range(2):
            for i in range(0, gd.n_sides, 2):
                phi = phis[i + s]
                sel = np.flatnonzero(gd.fe_frac[gd.he_edge] == i // 2)
                if sel.size == 0:
                    continue
                Ip = np.zeros(sel.size)
                for q in range(len(tw)):
                    x = (gd.he_pts[sel, 0]
                         + ts[q] * (gd.he_pts[sel, 1] - gd.he_pts[sel, 0]))
                    Ip += tw[q] * gd.he_length[sel] * np.asarray(
                        phi(x), dtype=float)
                t = gd.he_trace_dof[sel, s]
                f = gd.he_frac_dof[sel]
                np.add.at(r, t, coef_trace * Ip)
                np.add.at(r, f, coef_frac * Ip)
                for dof in (t, f):
                    np.add.at(r_abs, dof, 2.0 * np.abs(Ip))
    return r, r_abs


def limit_conformity_defect(cache: GDNormCache, q_m, div_q_m, q_f=None,
                            div_q_f=None, phi_a=None, *, degree=2,
                            check_degree=4) -> LimitConformityDefect:
    """Dual norm of the discrete integration-by-parts functional of the
    smooth flux ``(q_m, q_f)`` and side functions ``phi_a``.

    ``q_m`` maps positions to vectors with analytic divergence
    ``div_q_m``; ``q_f`` is a tangential fracture field (dotted with the
    edge tangents) with tangential divergence ``div_q_f``; ``phi_a`` is a
    single callable for all sides or one per side.  The functional is
    assembled at two quadrature degrees: a material difference between
    the two dual norms raises the insufficiency flag.
    """
    gd = cache.gd
    if phi_a is None:
        phis = None
    elif callable(phi_a):
        phis = (phi_a,) * gd.n_sides
    else:
        phis = tuple(phi_a)
        if len(phis) != gd.n_sides:
            raise ValueError(
                f"expected {gd.n_sides} side functions, got {len(phis)}")
    r_base, _ = _conformity_functional(gd, q_m, div_q_m, q_f, div_q_f, phis,
                                       degree)
    r_fine, a_fine = _conformity_functional(gd, q_m, div_q_m, q_f, div_q_f,
                                            phis, check_degree)
    w_base = dual_norm_functional(cache, r_base)
    w_fine = dual_norm_functional(cache, r_fine)
    # the magnitude functional supplies an absolute floor so that pure
    # roundoff around an exactly-cancelling assembly is not flagged
    mass = dual_norm_functional(cache, a_fine)
    flag = abs(w_fine - w_base) > 1e-6 * w_fine + 1e-13 * mass
    return LimitConformityDefect(value=w_fine, value_base=w_base,
                                 quadrature_flag=bool(flag))


# ---------------------------------------------------------------------------
# compactness translate estimate


def _difference_rows(colmap, w, dof0, dof_fwd, bwd_inside):
    """Rows of sqrt-weighted value differences with zero extension.

    One row per sample where the translated value differs; the backward
    check adds the pure-value rows covering samples whose preimage lies
    outside the domain.
    """
    sw = np.sqrt(w)
    rows_i, cols_i, vals_i = [], [], []
    n_rows = 0

    keep = dof_fwd != dof0
    idx = np.flatnonzero(keep)
    rid = n_rows + np.arange(idx.size)
    n_rows += idx.size
    c0 = colmap[dof0[idx]]
    m = c0 >= 0
    rows_i.append(rid[m])
    cols_i.append(c0[m])
    vals_i.append(-sw[idx][m])
    cf = np.full(idx.size, -1, dtype=np.int64)
    pos = dof_fwd[idx] >= 0
    cf[pos] = colmap[dof_fwd[idx][pos]]
    m = cf >= 0
    rows_i.append(rid[m])
    cols_i.append(cf[m])
    vals_i.append(sw[idx][m])

    idx = np.flatnonzero(~bwd_inside)
    rid = n_rows + np.arange(idx.size)
    n_rows += idx.size
    c0 = colmap[dof0[idx]]
    m = c0 >= 0
    rows_i.append(rid[m])
    cols_i.append(c0[m])
    vals_i.append(sw[idx][m])
    return rows_i, cols_i, vals_i, n_rows


def translate_difference_blocks(cache: GDNormCache, xi, degree=1):
    """Sparse maps ``v -> sqrt-weighted translate differences`` for the
    matrix, fracture, and trace value reconstructions.

    Each row samples ``v(x + xi) - v(x)`` at one quadrature point, with
    functions extended by zero outside their domain; fracture and trace
    functions translate by the tangential component of ``xi`` along
    their fracture.  The squared row sums approximate the translate
    integrals, so ``M^T M`` is the translate-difference Gram matrix.
    """
    gd = cache.gd
    xi = np.asarray(xi, dtype=float)
    colmap = np.full(gd.n_dofs, -1, dtype=np.int64)
    colmap[cache.free] = np.arange(cache.n_free)
    blocks = {}

    # matrix reconstruction: per-piece quadrature, 2d point location
    lam, wq = triangle_quadrature(degree)
    xs, ws = [], []
    for q in range(len(wq)):
        xs.append(np.einsum("j,pjd->pd", lam[q], gd.piece_vertices))
        ws.append(wq[q] * gd.piece_area)
    x0 = np.concatenate(xs)
    w0 = np.concatenate(ws)
    dof0 = np.tile(gd.piece_dof, len(wq))
    locator = cache.locator
    fwd = locator.piece_index(x0 + xi, outside=-1)
    dof_fwd = np.full(fwd.shape, -1, dtype=np.int64)
    inside = fwd >= 0
    dof_fwd[inside] = gd.piece_dof[fwd[inside]]
    bwd_inside = locator.piece_index(x0 - xi, outside=-1) >= 0
    rows_i, cols_i, vals_i, n_rows = _difference_rows(
        colmap, w0, dof0, dof_fwd, bwd_inside)
    blocks["matrix"] = sp.coo_matrix(
        (np.concatenate(vals_i),
         (np.concatenate(rows_i), np.concatenate(cols_i))),
        shape=(n_rows, cache.n_free)).tocsr()

    # fracture and trace reconstructions: arclength location per fracture
    ts, tw = segment_quadrature(degree)
    fam_rows = {"fracture": [[], [], [], 0], "trace": [[], [], [], 0]}
    sides = cache.sides
    for fid in range(sides.n_fractures):
        loc = FractureLocator(gd, sides, fid)
        order = sides.fracture_order[fid]
        a = gd.mesh.nodes[int(sides.fe_nodes[order[0], 0])]
        b = gd.mesh.nodes[int(sides.fe_nodes[order[-1], 1])]
        tau = (b - a) / math.hypot(*(b - a))
        delta = float(xi @ tau)
        lens = gd.he_length[loc.he_ids]
        s0 = (loc.starts[:, None] + ts[None, :] * lens[:, None]).ravel()
        w0 = (tw[None, :] * lens[:, None]).ravel()
        he0 = np.repeat(loc.he_ids, len(ts))
        s_fwd = s0 + delta
        fwd_in = (s_fwd >= 0.0) & (s_fwd <= loc.total)
        he_fwd = np.full(s0.shape, -1, dtype=np.int64)
        he_fwd[fwd_in] = loc.half_edge(s_fwd[fwd_in])
        s_bwd = s0 - delta
        bwd_in = (s_bwd >= 0.0) & (s_bwd <= loc.total)

        for fam, dof_of in (("fracture", lambda h: gd.he_frac_dof[h]),
                            ("trace", None)):
            layers = ((None,) if fam == "fracture" else (0, 1))
            for s in layers:
                if fam == "fracture":
                    d0 = dof_of(he0)
                    df = np.where(he_fwd >= 0, dof_of(np.maximum(he_fwd, 0)),
                                  -1)
                else:
                    d0 = gd.he_trace_dof[he0, s]
                    df = np.where(he_fwd >= 0,
                                  gd.he_trace_dof[np.maximum(he_fwd, 0), s],
                                  -1)
                ri, ci, vi, nr = _difference_rows(colmap, w0, d0, df, bwd_in)
                acc = fam_rows[fam]
                for part_r, part_c, part_v in zip(ri, ci, vi):
                    acc[0].append(part_r + acc[3])
                    acc[1].append(part_c)
                    acc[2].append(part_v)
                acc[3] += nr
    for fam, (ri, ci, vi, nr) in fam_rows.items():
        if ri:
            blocks[fam] = sp.coo_matrix(
                (np.concatenate(vi), (np.concatenate(ri), np.concatenate(ci))),
                shape=(nr, cache.n_free)).tocsr()
        else:
            blocks[fam] = sp.csr_matrix((0, cache.n_free))
    return blocks


def compactness_translate_estimate(cache: GDNormCache, xis, *, degree=1,
                                   tol=1e-10, max_iters=100_000,
                                   seed=0) -> np.ndarray:
    """Largest translate-to-norm ratio per translation vector.

    For each ``xi`` the squared-sum translate surrogate is maximized over
    the constrained dof space as a generalized Rayleigh quotient against
    the norm Gram matrix.
    """
    values = []
    for xi in xis:
        blocks = translate_difference_blocks(cache, np.asarray(xi, float),
                                             degree=degree)
        M = sp.vstack([blocks[k] for k in ("matrix", "fracture", "trace")])
        M = M.tocsr()
        if M.nnz == 0:
            values.append(0.0)
            continue
        lam, _ = generalized_max_eigenvalue(
            lambda x: M.T @ (M @ x), cache.A, solve=cache.solve, tol=tol,
            max_iters=max_iters, seed=seed)
        values.append(math.sqrt(max(lam, 0.0)))
    return np.asarray(values)


# ---------------------------------------------------------------------------
# dual norms


def dual_norm_functional(cache: GDNormCache, r) -> float:
    """Dual norm ``sqrt(r^T A^{-1} r)`` of a linear functional given by its
    dof coefficients (full length, constrained rows dropped, or reduced)."""
    r = np.asarray(r, dtype=float)
    if r.shape == (cache.gd.n_dofs,):
        r = r[cache.free]
    elif r.shape != (cache.n_free,):
        raise ValueError(
            f"functional size mismatch: got {r.shape}, expected "
            f"({cache.gd.n_dofs},) or ({cache.n_free},)")
    if not r.any():
        return 0.0
    return math.sqrt(max(float(r @ cache.solve(r)), 0.0))


def dual_norm_time_derivative(cache: GDNormCache, model, U_new, U_old,
                              dt) -> float:
    """Dual norm of the stored-amount increment functional between two
    states over ``dt``.

    The functional pairs the per-dof increment of phase-1 amounts (rock
    and interface storage weights included) with the value
    reconstructions; phase-2 increments are its exact negative, so the
    value is phase symmetric.
    """
    m_new = model.accumulation(np.asarray(U_new, dtype=float))[:, 0]
    m_old = model.accumulation(np.asarray(U_old, dtype=float))[:, 0]
    return dual_norm_functional(cache, (m_new - m_old) / float(dt))
