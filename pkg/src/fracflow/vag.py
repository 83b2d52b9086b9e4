"""Vertex-and-cell discretisation with side-resolved unknowns at fractures.

Degrees of freedom:

* one matrix dof per *sector* of every mesh node.  The triangle fan around
  a node is partitioned into sectors by the incident fracture edges (two
  triangles sharing a non-fracture edge at the node belong to the same
  sector).  Ordinary nodes have one sector; a node on a fracture has one
  matrix dof per side, which is what lets the matrix pressure be
  discontinuous across the fracture.  A fracture tip leaves the fan
  connected, so the matrix stays continuous around the tip.
* one fracture dof per node on the fracture network;
* one cell dof per triangle, stored as the trailing block so cells can be
  eliminated locally from linearized systems.

Reconstructions:

* the matrix gradient is the P1 gradient on each of the three sub-triangles
  (cell centre, node, node) of every triangle, using the sector dofs seen
  by that triangle;
* the matrix reconstruction subdivides each sub-triangle into four equal
  pieces (midpoint subdivision): the corner piece at a vertex takes that
  vertex's dof and the central piece the cell dof.  Pieces that would
  belong to a side-resolved dof at a fracture node are reassigned to the
  cell dof: interface dofs carry no porous volume, so their storage is
  exactly the interface storage and nothing else (with zero interface
  storage their accumulation vanishes identically, which the nonlinear
  solver must then report as a singular system rather than mask);
* the fracture gradient is the tangential two-point difference per edge;
  fracture values and matrix traces are piecewise constant per half-edge;
* the jump on each side is trace minus fracture value per half-edge.
"""

from __future__ import annotations

import numpy as np

from .gd import DOF_CELL, DOF_FRACTURE, DOF_MATRIX, GradientDiscretisation
from .mesh import Mesh, SidesIndex, _edge_map, side_geometry

__all__ = ["build_vag", "dirichlet_mask", "VagLayout"]


class VagLayout:
    """Bookkeeping from mesh entities to dof ids (useful for tests/BCs)."""

    def __init__(self, mesh: Mesh, sides: SidesIndex):
        nn, nt = mesh.n_nodes, mesh.n_triangles
        frac_nodes = mesh.fracture_nodes()
        frac_set = set(int(n) for n in frac_nodes)
        frac_keys = {tuple(sorted((int(a), int(b)))) for a, b in mesh.frac_edges}

        node_tris: list[list[int]] = [[] for _ in range(nn)]
        for t, tri in enumerate(mesh.triangles):
            for v in tri:
                node_tris[int(v)].append(t)

        # union-find over (node, incident triangle), joined across every
        # shared non-fracture edge
        parent: dict[tuple[int, int], tuple[int, int]] = {}

        def find(x):
            root = x
            while parent.setdefault(root, root) != root:
                root = parent[root]
            while parent[x] != root:
                parent[x], x = root, parent[x]
            return root

        for (a, b), ts in _edge_map(mesh.triangles).items():
            if len(ts) != 2 or (a, b) in frac_keys:
                continue
            for n in (a, b):
                ra, rb = find((n, ts[0])), find((n, ts[1]))
                if ra != rb:
                    parent[ra] = rb

        # sector dof ids, grouped by node, ordered by smallest triangle id
        self.sector_of: dict[tuple[int, int], int] = {}
        self.node_dofs: list[list[int]] = [[] for _ in range(nn)]
        sector_tris: list[list[int]] = []
        next_dof = 0
        for n in range(nn):
            groups: dict[tuple[int, int], list[int]] = {}
            for t in node_tris[n]:
                groups.setdefault(find((n, t)), []).append(t)
            for tris in sorted(groups.values(), key=min):
                for t in tris:
                    self.sector_of[(n, t)] = next_dof
                self.node_dofs[n].append(next_dof)
                sector_tris.append(sorted(tris))
                next_dof += 1
        self.n_node_dofs = next_dof
        self.sector_tris = sector_tris

        self.frac_nodes = frac_nodes
        self.frac_dof_of_node = {int(n): self.n_node_dofs + k
                                 for k, n in enumerate(frac_nodes)}
        self.n_frac_dofs = len(frac_nodes)
        self.cell_dof0 = self.n_node_dofs + self.n_frac_dofs
        self.n_dofs = self.cell_dof0 + nt
        self.mesh = mesh
        self.sides = sides
        self.is_frac_node = np.zeros(nn, dtype=bool)
        self.is_frac_node[frac_nodes] = True

    def cell_dof(self, t: int) -> int:
        return self.cell_dof0 + t


def build_vag(mesh: Mesh, shift: float = 0.5) -> tuple[GradientDiscretisation, VagLayout]:
    """Build the discretisation tables for ``mesh``.

    ``shift`` positions the interpolation point of side-resolved dofs at
    ``node + shift * (sector centroid mean - node)``.
    """
    sides = side_geometry(mesh)
    layout = VagLayout(mesh, sides)
    nn, nt = mesh.n_nodes, mesh.n_triangles
    N = layout.n_dofs
    centroids = mesh.tri_centroids()
    areas = mesh.tri_areas()

    # --- dof metadata ------------------------------------------------------
    dof_kind = np.empty(N, dtype=np.int64)
    dof_node = np.empty(N, dtype=np.int64)
    dof_pos = np.empty((N, 2))
    for n in range(nn):
        for d in layout.node_dofs[n]:
            dof_kind[d] = DOF_MATRIX
            dof_node[d] = n
            dof_pos[d] = mesh.nodes[n]
    for n, d in layout.frac_dof_of_node.items():
        dof_kind[d] = DOF_FRACTURE
        dof_node[d] = n
        dof_pos[d] = mesh.nodes[n]
    for t in range(nt):
        d = layout.cell_dof(t)
        dof_kind[d] = DOF_CELL
        dof_node[d] = t
        dof_pos[d] = centroids[t]

    eval_pos = dof_pos.copy()
    for d, tris in enumerate(layout.sector_tris):
        n = dof_node[d]
        if layout.is_frac_node[n]:
            mean = centroids[tris].mean(axis=0)
            eval_pos[d] = dof_pos[d] + shift * (mean - dof_pos[d])

    # --- matrix gradient and reconstruction tables --------------------------
    ns = 3 * nt
    sub_dofs = np.empty((ns, 3), dtype=np.int64)
    sub_vertices = np.empty((ns, 3, 2))
    sub_tri = np.repeat(np.arange(nt, dtype=np.int64), 3)
    piece_dof = np.empty(4 * ns, dtype=np.int64)
    for t in range(nt):
        tri = mesh.triangles[t]
        cdof = layout.cell_dof(t)
        sdofs = [layout.sector_of[(int(v), t)] for v in tri]
        for e in range(3):
            i, j = e, (e + 1) % 3
            s = 3 * t + e
            sub_dofs[s] = (cdof, sdofs[i], sdofs[j])
            sub_vertices[s] = (centroids[t], mesh.nodes[tri[i]], mesh.nodes[tri[j]])
            di = cdof if layout.is_frac_node[tri[i]] else sdofs[i]
            dj = cdof if layout.is_frac_node[tri[j]] else sdofs[j]
            piece_dof[4 * s: 4 * s + 4] = (cdof, di, dj, cdof)
    sub_area = np.repeat(areas / 3.0, 3)
    sub_grads = _p1_gradients(sub_vertices)
    piece_area = np.repeat(sub_area / 4.0, 4)
    piece_vertices = _midpoint_subdivision(sub_vertices)

    # --- fracture tables -----------------------------------------------------
    nfe = mesh.n_frac_edges
    fe_dofs = np.empty((nfe, 2), dtype=np.int64)
    fe_length = np.empty(nfe)
    fe_width = np.empty(nfe)
    for k in range(nfe):
        n0, n1 = (int(v) for v in sides.fe_nodes[k])
        fe_dofs[k] = (layout.frac_dof_of_node[n0], layout.frac_dof_of_node[n1])
        fe_length[k] = float(np.hypot(*(mesh.nodes[n1] - mesh.nodes[n0])))
        fe_width[k] = mesh.fractures[int(mesh.frac_edge_fracture[k])].width

    nhe = 2 * nfe
    he_edge = np.repeat(np.arange(nfe, dtype=np.int64), 2)
    he_frac_dof = fe_dofs.ravel()
    he_length = np.repeat(fe_length / 2.0, 2)
    he_width = np.repeat(fe_width, 2)
    he_normal = np.repeat(sides.fe_normal, 2, axis=0)
    he_trace_dof = np.empty((nhe, 2), dtype=np.int64)
    he_pts = np.empty((nhe, 2, 2))
    for k in range(nfe):
        mid = 0.5 * mesh.nodes[sides.fe_nodes[k]].sum(axis=0)
        for e in range(2):
            n = int(sides.fe_nodes[k, e])
            h = 2 * k + e
            he_pts[h] = (mesh.nodes[n], mid)
            for s in range(2):
                he_trace_dof[h, s] = layout.sector_of[(n, int(sides.fe_tri[k, s]))]

    # --- volumes --------------------------------------------------------------
    vol_m = np.zeros(N)
    np.add.at(vol_m, piece_dof, piece_area)
    vol_f = np.zeros(N)
    vol_f_w = np.zeros(N)
    if nhe:
        np.add.at(vol_f, he_frac_dof, he_length)
        np.add.at(vol_f_w, he_frac_dof, he_length * he_width)
    vol_a = np.zeros(N)
    for s in range(2):
        if nhe:
            np.add.at(vol_a, he_trace_dof[:, s], he_length)

    gd = GradientDiscretisation(
        n_dofs=N, n_cells=nt, n_sides=sides.n_sides,
        sub_dofs=sub_dofs, sub_grads=sub_grads, sub_area=sub_area,
        sub_tri=sub_tri, sub_vertices=sub_vertices,
        piece_dof=piece_dof, piece_area=piece_area, piece_vertices=piece_vertices,
        fe_dofs=fe_dofs, fe_tangent=sides.fe_tangent.copy(), fe_length=fe_length,
        fe_width=fe_width, fe_frac=mesh.frac_edge_fracture.copy(),
        he_edge=he_edge, he_frac_dof=he_frac_dof, he_trace_dof=he_trace_dof,
        he_length=he_length, he_width=he_width, he_normal=he_normal, he_pts=he_pts,
        dof_kind=dof_kind, dof_node=dof_node, dof_pos=dof_pos, eval_pos=eval_pos,
        vol_m=vol_m, vol_f=vol_f, vol_f_w=vol_f_w, vol_a=vol_a, mesh=mesh)
    return gd, layout


def _p1_gradients(verts: np.ndarray) -> np.ndarray:
    """Gradients of the three P1 basis functions per triangle (n, 3, 2)."""
    p0, p1, p2 = verts[:, 0], verts[:, 1], verts[:, 2]
    area2 = ((p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
             - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1]))  # signed, 2A
    g = np.empty(verts.shape)
    for k, (a, b) in enumerate(((1, 2), (2, 0), (0, 1))):
        e = verts[:, a] - verts[:, b]   # p_{k+1} - p_{k+2}
        g[:, k, 0] = e[:, 1]
        g[:, k, 1] = -e[:, 0]
    return g / area2[:, None, None]


def _midpoint_subdivision(verts: np.ndarray) -> np.ndarray:
    """Four children per triangle: corners 0,1,2 then the central one."""
    q0, q1, q2 = verts[:, 0], verts[:, 1], verts[:, 2]
    m01, m12, m20 = 0.5 * (q0 + q1), 0.5 * (q1 + q2), 0.5 * (q2 + q0)
    children = np.empty((verts.shape[0], 4, 3, 2))
    children[:, 0] = np.stack([q0, m01, m20], axis=1)
    children[:, 1] = np.stack([m01, q1, m12], axis=1)
    children[:, 2] = np.stack([m20, m12, q2], axis=1)
    children[:, 3] = np.stack([m01, m12, m20], axis=1)
    return children.reshape(-1, 3, 2)


def dirichlet_mask(gd: GradientDiscretisation, tags) -> np.ndarray:
    """Dofs constrained by Dirichlet data on the tagged boundary parts.

    Matrix dofs of every node on a tagged boundary edge are constrained
    (all sectors of a fracture endpoint sit on the boundary), and so is the
    fracture dof of a fracture node on a tagged boundary.
    """
    tags = set(tags)
    node_tags = gd.mesh.node_boundary_tags()
    marked = np.zeros(gd.mesh.n_nodes, dtype=bool)
    for n, ts in node_tags.items():
        if tags & set(ts):
            marked[n] = True
    mask = np.zeros(gd.n_dofs, dtype=bool)
    not_cell = gd.dof_kind != DOF_CELL
    mask[not_cell] = marked[gd.dof_node[not_cell]]
    return mask
