"""Generic gradient-discretisation contract for hybrid 2D/1D flow.

A gradient discretisation supplies, for one vector of degrees of freedom
``u`` of length ``n_dofs``:

* a piecewise-constant matrix gradient ``gradient_matrix(u)`` given by P1
  sub-triangle tables,
* a piecewise-constant matrix reconstruction ``reconstruct_matrix(u)`` on a
  finer partition into "pieces" (each piece stores its own dof),
* a tangential fracture gradient per fracture edge and piecewise-constant
  fracture/trace reconstructions per half-edge,
* per-side pressure jumps ``jump(u) = trace - fracture`` per half-edge,
* dof metadata (kind, nominal position, interpolation position, volumes).

All downstream machinery (norms, conformity diagnostics, assembly) works
from these tables only, so alternative schemes can plug in by producing the
same structure.  Cell dofs, when present, form the trailing block so that
they can be eliminated locally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

DOF_MATRIX = 0   # matrix continuum dof (mesh node, possibly side-resolved)
DOF_FRACTURE = 1  # fracture dof (node on the fracture network)
DOF_CELL = 2     # cell dof (triangle), eliminable


@dataclass(frozen=True, eq=False)
class GradientDiscretisation:
    """Tables realizing the discrete reconstruction operators."""

    n_dofs: int
    n_cells: int
    n_sides: int

    # matrix gradient: one P1 patch per sub-triangle
    sub_dofs: np.ndarray        # (ns, 3) int dof ids
    sub_grads: np.ndarray       # (ns, 3, 2) gradient of each P1 basis
    sub_area: np.ndarray        # (ns,)
    sub_tri: np.ndarray         # (ns,) parent triangle
    sub_vertices: np.ndarray    # (ns, 3, 2)

    # matrix reconstruction: 4 pieces per sub-triangle in fixed order
    # [corner at cell vertex, corner at node i, corner at node j, central]
    piece_dof: np.ndarray       # (4 ns,)
    piece_area: np.ndarray      # (4 ns,)
    piece_vertices: np.ndarray  # (4 ns, 3, 2)

    # fracture gradient and reconstruction
    fe_dofs: np.ndarray         # (nfe, 2) fracture dofs at oriented ends
    fe_tangent: np.ndarray      # (nfe, 2)
    fe_length: np.ndarray       # (nfe,)
    fe_width: np.ndarray        # (nfe,) aperture d_f
    fe_frac: np.ndarray         # (nfe,) fracture id
    he_edge: np.ndarray         # (nhe,) fracture-edge id of each half-edge
    he_frac_dof: np.ndarray     # (nhe,)
    he_trace_dof: np.ndarray    # (nhe, 2) [side plus, side minus]
    he_length: np.ndarray       # (nhe,)
    he_width: np.ndarray        # (nhe,)
    he_normal: np.ndarray       # (nhe, 2) side-plus normal
    he_pts: np.ndarray          # (nhe, 2, 2) segment endpoints (node, midpoint)

    # dof metadata
    dof_kind: np.ndarray        # (N,) DOF_MATRIX / DOF_FRACTURE / DOF_CELL
    dof_node: np.ndarray        # (N,) owning node id (or triangle id for cells)
    dof_pos: np.ndarray         # (N, 2) nominal position
    eval_pos: np.ndarray        # (N, 2) interpolation point (side-shifted)
    vol_m: np.ndarray           # (N,) matrix volume of the dof's pieces
    vol_f: np.ndarray           # (N,) fracture measure (plain length)
    vol_f_w: np.ndarray         # (N,) aperture-weighted fracture measure
    vol_a: np.ndarray           # (N,) interface measure over sides traced

    mesh: object = None

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            val = getattr(self, name)
            if isinstance(val, np.ndarray):
                val.setflags(write=False)

    # -- reconstruction operators -------------------------------------------

    def gradient_matrix(self, u: np.ndarray) -> np.ndarray:
        """Piecewise-constant 2D gradient, one row per sub-triangle."""
        return np.einsum("skd,sk->sd", self.sub_grads, u[self.sub_dofs])

    def gradient_fracture(self, u: np.ndarray) -> np.ndarray:
        """Tangential derivative along each fracture edge (scalar)."""
        return (u[self.fe_dofs[:, 1]] - u[self.fe_dofs[:, 0]]) / self.fe_length

    def reconstruct_matrix(self, u: np.ndarray) -> np.ndarray:
        """Piecewise-constant matrix values, one per piece."""
        return u[self.piece_dof]

    def fracture_values(self, u: np.ndarray) -> np.ndarray:
        """Piecewise-constant fracture values, one per half-edge."""
        return u[self.he_frac_dof]

    def trace_values(self, u: np.ndarray) -> np.ndarray:
        """Matrix trace per half-edge and side: (nhe, 2)."""
        return u[self.he_trace_dof]

    def jump(self, u: np.ndarray) -> np.ndarray:
        """Interface jump trace - fracture per half-edge and side: (nhe, 2)."""
        return u[self.he_trace_dof] - u[self.he_frac_dof][:, None]

    # -- measures -------------------------------------------------------------

    @property
    def n_sub(self) -> int:
        return self.sub_dofs.shape[0]

    @property
    def n_he(self) -> int:
        return self.he_frac_dof.shape[0]

    def seminorm_parts(self, u: np.ndarray) -> tuple[float, float, float]:
        """(matrix gradient, fracture gradient, jump) squared seminorms.

        Fracture and jump terms use the plain length measure.
        """
        gm = self.gradient_matrix(u)
        part_m = float(self.sub_area @ (gm * gm).sum(axis=1))
        gf = self.gradient_fracture(u)
        part_f = float(self.fe_length @ (gf * gf))
        j = self.jump(u)
        part_a = float(self.he_length @ (j * j).sum(axis=1))
        return part_m, part_f, part_a

    def norm(self, u: np.ndarray) -> float:
        """Discrete energy norm: gradients plus interface jumps."""
        return float(np.sqrt(sum(self.seminorm_parts(u))))

    def l2_matrix(self, u: np.ndarray) -> float:
        v = self.reconstruct_matrix(u)
        return float(np.sqrt(self.piece_area @ (v * v)))

    def l2_fracture(self, u: np.ndarray) -> float:
        v = self.fracture_values(u)
        return float(np.sqrt(self.he_length @ (v * v)))


def gram_matrix(gd: GradientDiscretisation) -> sp.csr_matrix:
    """Gram matrix of the discrete energy norm: u . A u = norm(u)^2."""
    N = gd.n_dofs
    rows, cols, vals = [], [], []

    # matrix gradient terms: area * G G^T per sub-triangle
    G = gd.sub_grads                                   # (ns, 3, 2)
    M = np.einsum("sid,sjd->sij", G, G) * gd.sub_area[:, None, None]
    idx = gd.sub_dofs
    for i in range(3):
        for j in range(3):
            rows.append(idx[:, i])
            cols.append(idx[:, j])
            vals.append(M[:, i, j])

    # fracture tangential terms: (1/L) [[1,-1],[-1,1]]
    if gd.fe_dofs.size:
        inv = 1.0 / gd.fe_length
        d0, d1 = gd.fe_dofs[:, 0], gd.fe_dofs[:, 1]
        for r, c, v in ((d0, d0, inv), (d1, d1, inv), (d0, d1, -inv), (d1, d0, -inv)):
            rows.append(r)
            cols.append(c)
            vals.append(v)

    # jump terms per half-edge and side: (L/2) (e_t - e_f)(e_t - e_f)^T
    for s in range(2):
        if not gd.he_frac_dof.size:
            break
        t, f, w = gd.he_trace_dof[:, s], gd.he_frac_dof, gd.he_length
        for r, c, v in ((t, t, w), (f, f, w), (t, f, -w), (f, t, -w)):
            rows.append(r)
            cols.append(c)
            vals.append(v)

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    return sp.coo_matrix((vals, (rows, cols)), shape=(N, N)).tocsr()


def l2_gram_matrix(gd: GradientDiscretisation) -> sp.csr_matrix:
    """Diagonal Gram of the combined L2 reconstruction (matrix + fracture)."""
    diag = np.zeros(gd.n_dofs)
    np.add.at(diag, gd.piece_dof, gd.piece_area)
    np.add.at(diag, gd.he_frac_dof, gd.he_length)
    return sp.diags(diag).tocsr()


def interpolate(gd: GradientDiscretisation, f_matrix, f_fracture=None,
                where: str = "shifted") -> np.ndarray:
    """Nodal interpolation of continuum fields onto the dofs.

    ``f_matrix(points)`` maps an (n, 2) array to n values and fills matrix
    and cell dofs; ``f_fracture`` (default: ``f_matrix``) fills fracture
    dofs.  With ``where="shifted"`` matrix dofs at fracture nodes evaluate
    at a point displaced into their own side, which resolves fields that
    are discontinuous across the fracture; ``where="nominal"`` evaluates at
    the node itself.
    """
    if where not in ("shifted", "nominal"):
        raise ValueError(f"unknown interpolation mode {where!r}")
    pos = gd.eval_pos if where == "shifted" else gd.dof_pos
    f_fracture = f_fracture if f_fracture is not None else f_matrix
    u = np.zeros(gd.n_dofs)
    mat = gd.dof_kind != DOF_FRACTURE
    if mat.any():
        u[mat] = np.asarray(f_matrix(pos[mat]), dtype=float)
    if (~mat).any():
        u[~mat] = np.asarray(f_fracture(pos[~mat]), dtype=float)
    return u


# ---------------------------------------------------------------------------
# point evaluation of the piecewise-constant reconstructions


class PointLocator:
    """Maps physical points to reconstruction pieces.

    Triangle lookup uses matplotlib's trapezoidal-map point location on the
    coarse mesh; the sub-triangle and piece follow from barycentric logic
    (the sub-triangle is the one opposite the smallest barycentric
    coordinate; a corner piece owns the points whose sub-triangle
    barycentric coordinate exceeds 1/2).
    """

    def __init__(self, gd: GradientDiscretisation):
        import matplotlib.tri as mtri

        mesh = gd.mesh
        self.gd = gd
        self.mesh = mesh
        self._tri = mtri.Triangulation(mesh.nodes[:, 0], mesh.nodes[:, 1],
                                       triangles=mesh.triangles)
        self._finder = self._tri.get_trifinder()

    def piece_index(self, points: np.ndarray, outside: str | int = "raise"
                    ) -> np.ndarray:
        """Piece index per point; ``outside`` is an integer sentinel for
        points beyond the mesh (default: raise on any such point)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        mesh = self.mesh
        t = np.asarray(self._finder(points[:, 0], points[:, 1]), dtype=np.int64)
        inside = t >= 0
        if not inside.all():
            if outside == "raise":
                bad = points[~inside][0]
                raise ValueError(f"point {bad} is outside the meshed domain")
            t = np.where(inside, t, 0)
        lam = _barycentric(mesh.nodes[mesh.triangles[t]], points)
        # sub-triangle k covers the edge opposite vertex (k+2)%3, i.e. the
        # smallest coordinate argmin selects edge index (argmin+1)%3
        edge = (np.argmin(lam, axis=1) + 1) % 3
        sub = 3 * t + edge
        mu = _barycentric(self.gd.sub_vertices[sub], points)
        corner = np.argmax(mu, axis=1)
        piece_local = np.where(mu[np.arange(len(points)), corner] >= 0.5, corner, 3)
        piece = 4 * sub + piece_local
        if not inside.all():
            piece = np.where(inside, piece, int(outside))
        return piece

    def matrix_values(self, u: np.ndarray, points: np.ndarray) -> np.ndarray:
        return u[self.gd.piece_dof[self.piece_index(points)]]


def _barycentric(verts: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of points (n,2) in triangles verts (n,3,2)."""
    a, b, c = verts[:, 0], verts[:, 1], verts[:, 2]
    v0, v1, v2 = b - a, c - a, points - a
    d00 = (v0 * v0).sum(1)
    d01 = (v0 * v1).sum(1)
    d11 = (v1 * v1).sum(1)
    d20 = (v2 * v0).sum(1)
    d21 = (v2 * v1).sum(1)
    den = d00 * d11 - d01 * d01
    w1 = (d11 * d20 - d01 * d21) / den
    w2 = (d00 * d21 - d01 * d20) / den
    return np.column_stack([1.0 - w1 - w2, w1, w2])


class FractureLocator:
    """Maps arclength positions along one fracture to half-edges."""

    def __init__(self, gd: GradientDiscretisation, sides, frac_id: int):
        order = sides.fracture_order[frac_id]
        self.gd = gd
        # half-edges of edge k are 2k (end 0) and 2k+1 (end 1); within an
        # oriented edge, end 0 covers the first half of the edge
        bounds, he_ids = [], []
        for k in order:
            s0, s1 = sides.fe_arc[k]
            mid = 0.5 * (s0 + s1)
            bounds += [s0, mid]
            he_ids += [2 * int(k), 2 * int(k) + 1]
        self.starts = np.asarray(bounds)
        self.he_ids = np.asarray(he_ids, dtype=np.int64)
        self.total = float(sides.fe_arc[order[-1], 1])

    def half_edge(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        if np.any((s < 0) | (s > self.total)):
            raise ValueError("arclength outside the fracture")
        idx = np.searchsorted(self.starts, s, side="right") - 1
        idx = np.clip(idx, 0, len(self.he_ids) - 1)
        return self.he_ids[idx]

    def fracture_values(self, u: np.ndarray, s: np.ndarray) -> np.ndarray:
        return u[self.gd.he_frac_dof[self.half_edge(s)]]

    def trace_values(self, u: np.ndarray, s: np.ndarray) -> np.ndarray:
        return u[self.gd.he_trace_dof[self.half_edge(s)]]


# ---------------------------------------------------------------------------
# quadrature rules (reference coordinates)


def triangle_quadrature(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric points and weights (summing to 1) exact to ``degree``."""
    if degree <= 1:
        return np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])
    if degree == 2:
        pts = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
        return pts, np.full(3, 1 / 3)
    if degree <= 4:
        a1, w1 = 0.445948490915965, 0.223381589678011
        a2, w2 = 0.091576213509771, 0.109951743655322
        pts = np.array([
            [1 - 2 * a1, a1, a1], [a1, 1 - 2 * a1, a1], [a1, a1, 1 - 2 * a1],
            [1 - 2 * a2, a2, a2], [a2, 1 - 2 * a2, a2], [a2, a2, 1 - 2 * a2],
        ])
        return pts, np.array([w1, w1, w1, w2, w2, w2])
    raise ValueError(f"no triangle rule of degree {degree}")


def segment_quadrature(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Points in [0, 1] and weights (summing to 1) exact to ``degree``."""
    n = max(1, (degree + 2) // 2)
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def integrate_matrix(gd: GradientDiscretisation, u: np.ndarray, func,
                     degree: int = 2) -> float:
    """Integral of reconstruct(u) * func over the matrix domain."""
    pts, w = triangle_quadrature(degree)
    verts = gd.piece_vertices                       # (np, 3, 2)
    vals = gd.reconstruct_matrix(u)
    total = 0.0
    for k in range(len(w)):
        x = np.einsum("j,pjd->pd", pts[k], verts)
        total += w[k] * float(gd.piece_area @ (vals * func(x)))
    return total
