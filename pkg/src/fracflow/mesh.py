"""Conforming triangular meshes with embedded 1D fracture networks.

The mesh itself is a standard conforming triangulation; fractures are
chains of mesh edges tagged with a fracture id.  Pressure discontinuities
across fractures are realized later at the degree-of-freedom level (see
:mod:`fracflow.vag`), not by duplicating mesh nodes.

Conventions
-----------
* triangles are counter-clockwise;
* every fracture edge is interior (shared by exactly two triangles);
* each fracture is a simple chain of edges: two endpoint nodes, no branching
  within one fracture id; distinct fractures may share endpoint nodes;
* each fracture has two *sides*.  Side orientation derives from a canonical
  walk of the chain (started at the lexicographically smallest endpoint);
  with unit tangent t along the walk, the side "plus" normal is
  n = (t_y, -t_x), and the side-a adjacent triangle T of an edge satisfies
  (centroid(T) - midpoint(edge)) . n_a < 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

BOUNDARY_TAGS = ("bottom", "top", "left", "right")


class MeshError(ValueError):
    """Mesh construction or validation failure."""


@dataclass(frozen=True, eq=False)
class FractureSpec:
    """One fracture: a polyline (snapped onto mesh edges) plus aperture."""

    polyline: np.ndarray          # (k, 2) vertices, k >= 2
    width: float                  # aperture d_f [m]
    region: int = 0

    def __post_init__(self):
        poly = np.atleast_2d(np.asarray(self.polyline, dtype=float))
        if poly.shape[0] < 2 or poly.shape[1] != 2:
            raise MeshError("fracture polyline needs at least two 2D vertices")
        seg = np.diff(poly, axis=0)
        if np.any(np.hypot(seg[:, 0], seg[:, 1]) <= 0):
            raise MeshError("fracture polyline has a zero-length segment")
        if self.width <= 0:
            raise MeshError(f"fracture width must be positive, got {self.width}")
        object.__setattr__(self, "polyline", poly)

    @property
    def length(self) -> float:
        seg = np.diff(self.polyline, axis=0)
        return float(np.hypot(seg[:, 0], seg[:, 1]).sum())


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangulation with tagged fracture and boundary edges."""

    nodes: np.ndarray             # (nn, 2)
    triangles: np.ndarray         # (nt, 3) int, CCW
    tri_region: np.ndarray        # (nt,) int
    frac_edges: np.ndarray        # (nf, 2) int node pairs
    frac_edge_fracture: np.ndarray  # (nf,) int fracture id
    frac_edge_region: np.ndarray  # (nf,) int
    boundary_edges: np.ndarray    # (nb, 2) int node pairs
    boundary_tag: np.ndarray      # (nb,) int index into BOUNDARY_TAGS-like table
    tag_names: tuple[str, ...] = BOUNDARY_TAGS
    fractures: tuple[FractureSpec, ...] = ()
    extent: tuple[float, float] | None = None

    def __post_init__(self):
        for name in ("nodes", "triangles", "tri_region", "frac_edges",
                     "frac_edge_fracture", "frac_edge_region",
                     "boundary_edges", "boundary_tag"):
            arr = np.asarray(getattr(self, name))
            if name == "nodes":
                arr = arr.astype(float)
            else:
                arr = arr.astype(np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    # -- derived quantities -------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_frac_edges(self) -> int:
        return self.frac_edges.shape[0]

    def tri_areas(self) -> np.ndarray:
        p = self.nodes[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    def tri_centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def frac_edge_lengths(self) -> np.ndarray:
        d = self.nodes[self.frac_edges[:, 1]] - self.nodes[self.frac_edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def fracture_nodes(self) -> np.ndarray:
        """Sorted unique node ids incident to any fracture edge."""
        if self.n_frac_edges == 0:
            return np.empty(0, dtype=np.int64)
        return np.unique(self.frac_edges)

    def fracture_width(self, frac_id: int) -> float:
        return self.fractures[frac_id].width

    def boundary_nodes(self) -> np.ndarray:
        if self.boundary_edges.size == 0:
            return np.empty(0, dtype=np.int64)
        return np.unique(self.boundary_edges)

    def node_boundary_tags(self) -> dict[int, tuple[str, ...]]:
        """Node id -> tags of incident boundary edges, in tag-table order."""
        tags: dict[int, set[int]] = {}
        for (n0, n1), t in zip(self.boundary_edges, self.boundary_tag):
            tags.setdefault(int(n0), set()).add(int(t))
            tags.setdefault(int(n1), set()).add(int(t))
        return {n: tuple(self.tag_names[i] for i in sorted(ts))
                for n, ts in tags.items()}

    def edge_length_scale(self) -> float:
        """Representative mesh size: max triangle edge length."""
        p = self.nodes[self.triangles]
        e = np.concatenate([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]])
        return float(np.hypot(e[:, 0], e[:, 1]).max())


# ---------------------------------------------------------------------------
# edge topology helpers


def _edge_map(triangles: np.ndarray) -> dict[tuple[int, int], list[int]]:
    """Sorted node pair -> list of adjacent triangle indices."""
    edges: dict[tuple[int, int], list[int]] = {}
    for t, tri in enumerate(triangles):
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            key = (a, b) if a < b else (b, a)
            edges.setdefault(key, []).append(t)
    return edges


def _point_on_segment(points: np.ndarray, p0: np.ndarray, p1: np.ndarray,
                      tol: float) -> np.ndarray:
    """Boolean mask: points within tol of segment [p0, p1] (including ends)."""
    d = p1 - p0
    L2 = float(d @ d)
    rel = points - p0
    t = (rel @ d) / L2
    proj = p0 + np.clip(t, 0.0, 1.0)[:, None] * d
    dist = np.hypot(*(points - proj).T)
    return dist <= tol


# ---------------------------------------------------------------------------
# structured generator


def build_structured_mesh(lx: float, ly: float, nx: int, ny: int,
                          fractures: tuple[FractureSpec, ...] = (),
                          cell_region=None) -> Mesh:
    """Uniform split-quad triangulation of (0, lx) x (0, ly).

    Each of the nx * ny quads is split along its (i, j) -> (i+1, j+1)
    diagonal, giving 2 nx ny triangles and (nx+1)(ny+1) nodes.  Fracture
    polylines must follow mesh edges; misaligned fractures are rejected
    with a diagnostic.  ``cell_region`` optionally maps centroid coordinates
    (array (n, 2)) to integer region tags.
    """
    if lx <= 0 or ly <= 0 or nx < 1 or ny < 1:
        raise MeshError(f"invalid extent/resolution: lx={lx}, ly={ly}, nx={nx}, ny={ny}")
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    xx, yy = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    def nid(i, j):
        return j * (nx + 1) + i

    tris = []
    for j in range(ny):
        for i in range(nx):
            n00, n10 = nid(i, j), nid(i + 1, j)
            n11, n01 = nid(i + 1, j + 1), nid(i, j + 1)
            tris.append((n00, n10, n11))
            tris.append((n00, n11, n01))
    triangles = np.asarray(tris, dtype=np.int64)
    centroids = nodes[triangles].mean(axis=1)
    if cell_region is None:
        tri_region = np.zeros(len(triangles), dtype=np.int64)
    else:
        tri_region = np.asarray(cell_region(centroids), dtype=np.int64)

    edges = _edge_map(triangles)
    boundary, tags = [], []
    tol = 1e-9 * max(lx, ly)
    for (a, b), tlist in edges.items():
        if len(tlist) != 1:
            continue
        mid = 0.5 * (nodes[a] + nodes[b])
        if abs(mid[1]) <= tol:
            tag = 0
        elif abs(mid[1] - ly) <= tol:
            tag = 1
        elif abs(mid[0]) <= tol:
            tag = 2
        elif abs(mid[0] - lx) <= tol:
            tag = 3
        else:  # pragma: no cover - structured boundary is always on the box
            raise MeshError(f"boundary edge {(a, b)} not on the domain box")
        boundary.append((a, b))
        tags.append(tag)
    boundary = np.asarray(boundary, dtype=np.int64).reshape(-1, 2)
    tags = np.asarray(tags, dtype=np.int64)

    fe, fe_frac, fe_region = _snap_fractures(nodes, edges, fractures, tol)
    mesh = Mesh(nodes=nodes, triangles=triangles, tri_region=tri_region,
                frac_edges=fe, frac_edge_fracture=fe_frac, frac_edge_region=fe_region,
                boundary_edges=boundary, boundary_tag=tags,
                fractures=tuple(fractures), extent=(lx, ly))
    violations = validate_mesh(mesh)
    if violations:
        raise MeshError("generated mesh failed validation:\n  " + "\n  ".join(violations))
    return mesh


def _snap_fractures(nodes, edges, fractures, tol):
    """Tag mesh edges lying on the fracture polylines; verify full coverage."""
    fe, fe_frac, fe_region = [], [], []
    used: dict[tuple[int, int], int] = {}
    for fid, spec in enumerate(fractures):
        poly = spec.polyline
        covered = 0.0
        for s in range(poly.shape[0] - 1):
            p0, p1 = poly[s], poly[s + 1]
            on_seg = _point_on_segment(nodes, p0, p1, tol)
            for (a, b), tlist in edges.items():
                if not (on_seg[a] and on_seg[b]):
                    continue
                key = (a, b)
                if key in used:
                    if used[key] != fid:
                        raise MeshError(
                            f"fractures {used[key]} and {fid} overlap along edge {key}; "
                            "fractures may only share endpoints")
                    continue
                used[key] = fid
                fe.append(key)
                fe_frac.append(fid)
                fe_region.append(spec.region)
                covered += float(np.hypot(*(nodes[b] - nodes[a])))
        if abs(covered - spec.length) > max(tol, 1e-9 * spec.length):
            raise MeshError(
                f"fracture {fid} is not aligned with the mesh: polyline length "
                f"{spec.length:.6g} but only {covered:.6g} covered by mesh edges; "
                "fracture vertices must lie on mesh lines at this resolution")
    fe = np.asarray(fe, dtype=np.int64).reshape(-1, 2)
    return fe, np.asarray(fe_frac, dtype=np.int64), np.asarray(fe_region, dtype=np.int64)


# ---------------------------------------------------------------------------
# refinement


def refine_uniform(mesh: Mesh) -> Mesh:
    """Red refinement: every triangle splits into four via edge midpoints.

    Fracture and boundary edges split in two and inherit their tags.
    """
    nodes = [mesh.nodes]
    edge_mid: dict[tuple[int, int], int] = {}
    next_id = mesh.n_nodes
    mids = []

    def midpoint(a: int, b: int) -> int:
        nonlocal next_id
        key = (a, b) if a < b else (b, a)
        if key not in edge_mid:
            edge_mid[key] = next_id
            mids.append(0.5 * (mesh.nodes[key[0]] + mesh.nodes[key[1]]))
            next_id += 1
        return edge_mid[key]

    tris, regions = [], []
    for tri, reg in zip(mesh.triangles, mesh.tri_region):
        a, b, c = (int(v) for v in tri)
        mab, mbc, mca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        tris += [(a, mab, mca), (mab, b, mbc), (mca, mbc, c), (mab, mbc, mca)]
        regions += [reg] * 4
    new_nodes = np.vstack([mesh.nodes] + ([np.asarray(mids)] if mids else []))

    def split_edges(pairs, *attrs):
        out_pairs, out_attrs = [], [[] for _ in attrs]
        for k, (a, b) in enumerate(pairs):
            m = midpoint(int(a), int(b))
            out_pairs += [(int(a), m), (m, int(b))]
            for col, attr in zip(out_attrs, attrs):
                col += [attr[k]] * 2
        return (np.asarray(out_pairs, dtype=np.int64).reshape(-1, 2),
                *[np.asarray(c, dtype=np.int64) for c in out_attrs])

    fe, fe_frac, fe_region = split_edges(mesh.frac_edges, mesh.frac_edge_fracture,
                                         mesh.frac_edge_region)
    be, btag = split_edges(mesh.boundary_edges, mesh.boundary_tag)

    refined = Mesh(nodes=new_nodes, triangles=np.asarray(tris, dtype=np.int64),
                   tri_region=np.asarray(regions, dtype=np.int64),
                   frac_edges=fe, frac_edge_fracture=fe_frac, frac_edge_region=fe_region,
                   boundary_edges=be, boundary_tag=btag, tag_names=mesh.tag_names,
                   fractures=mesh.fractures, extent=mesh.extent)
    violations = validate_mesh(refined)
    if violations:
        raise MeshError("refined mesh failed validation:\n  " + "\n  ".join(violations))
    return refined


# ---------------------------------------------------------------------------
# validation


def validate_mesh(mesh: Mesh) -> list[str]:
    """Return a list of violation diagnostics (empty when the mesh is valid)."""
    out: list[str] = []
    nn = mesh.n_nodes
    if mesh.triangles.size and (mesh.triangles.min() < 0 or mesh.triangles.max() >= nn):
        out.append("triangle references a node id out of range")
        return out
    areas = mesh.tri_areas()
    bad = np.nonzero(areas <= 0)[0]
    if bad.size:
        out.append(f"{bad.size} triangles are degenerate or clockwise (first: {bad[0]})")
    if mesh.extent is not None and areas.size:
        total = float(areas.sum())
        target = mesh.extent[0] * mesh.extent[1]
        if abs(total - target) > 1e-10 * target:
            out.append(f"triangle areas sum to {total!r}, extent area is {target!r}")
    for t, tri in enumerate(mesh.triangles):
        if len(set(int(v) for v in tri)) != 3:
            out.append(f"triangle {t} has repeated nodes")
            break

    edges = _edge_map(mesh.triangles)
    over = [e for e, ts in edges.items() if len(ts) > 2]
    if over:
        out.append(f"non-manifold edges shared by >2 triangles: {over[:3]}")
    rim = {e for e, ts in edges.items() if len(ts) == 1}
    tagged = {tuple(sorted((int(a), int(b)))) for a, b in mesh.boundary_edges}
    if rim != tagged:
        missing = rim - tagged
        extra = tagged - rim
        if missing:
            out.append(f"{len(missing)} rim edges lack boundary tags (first: {sorted(missing)[:3]})")
        if extra:
            out.append(f"{len(extra)} tagged boundary edges are not rim edges")
    if mesh.boundary_tag.size and (mesh.boundary_tag.min() < 0
                                   or mesh.boundary_tag.max() >= len(mesh.tag_names)):
        out.append("boundary tag index out of range")

    # fracture edge checks
    seen: dict[tuple[int, int], int] = {}
    for k in range(mesh.n_frac_edges):
        a, b = (int(v) for v in mesh.frac_edges[k])
        key = tuple(sorted((a, b)))
        fid = int(mesh.frac_edge_fracture[k])
        if key in seen:
            out.append(f"fracture edge {key} tagged twice (fractures {seen[key]}, {fid})")
            continue
        seen[key] = fid
        adj = edges.get(key)
        if adj is None:
            out.append(f"fracture edge {key} is not a mesh edge")
        elif len(adj) != 2:
            out.append(f"fracture edge {key} adjacent to {len(adj)} triangles, expected 2")
        if fid < 0 or fid >= len(mesh.fractures):
            out.append(f"fracture edge {key} references unknown fracture {fid}")
    if mesh.n_frac_edges and mesh.frac_edge_region.min() < 0:
        out.append("negative fracture region tag")
    if mesh.tri_region.size and mesh.tri_region.min() < 0:
        out.append("negative matrix region tag")
    for fid, spec in enumerate(mesh.fractures):
        if spec.width <= 0:
            out.append(f"fracture {fid} has nonpositive width")
        try:
            _fracture_chain(mesh, fid)
        except MeshError as exc:
            out.append(str(exc))
    return out


# ---------------------------------------------------------------------------
# side geometry


@dataclass(frozen=True, eq=False)
class SidesIndex:
    """Two-sided interface geometry for every fracture.

    Global side ids are 2*fid (side plus) and 2*fid + 1 (side minus).
    Per fracture edge k (in mesh ordering):

    * ``fe_tangent[k]``: unit tangent of the canonical chain walk;
    * ``fe_normal[k]``: side-plus normal (t_y, -t_x); side minus uses its
      negation;
    * ``fe_tri[k, 0]`` / ``fe_tri[k, 1]``: the adjacent triangle on side
      plus resp. minus, i.e. (centroid - midpoint) . n_side < 0;
    * ``fe_nodes[k]``: the edge's nodes ordered along the walk;
    * ``fe_arc[k]``: arclengths of the oriented edge's two ends.
    """

    n_fractures: int
    fe_tangent: np.ndarray       # (nf, 2)
    fe_normal: np.ndarray        # (nf, 2) side-plus normal
    fe_tri: np.ndarray           # (nf, 2) int [plus, minus]
    fe_nodes: np.ndarray         # (nf, 2) int oriented along walk
    fe_arc: np.ndarray           # (nf, 2) arclength at oriented ends
    fracture_order: tuple[np.ndarray, ...]  # per fracture: edge ids along walk

    @property
    def n_sides(self) -> int:
        return 2 * self.n_fractures

    def side_fracture(self, side: int) -> int:
        return side // 2

    def side_sign(self, side: int) -> int:
        return +1 if side % 2 == 0 else -1

    def side_normals(self, side: int) -> np.ndarray:
        sgn = self.side_sign(side)
        return sgn * self.fe_normal


def _fracture_chain(mesh: Mesh, fid: int) -> list[int]:
    """Order fracture fid's edges as a simple chain; raise if not a chain."""
    ids = np.nonzero(mesh.frac_edge_fracture == fid)[0]
    if ids.size == 0:
        raise MeshError(f"fracture {fid} has no mesh edges")
    incid: dict[int, list[int]] = {}
    for k in ids:
        a, b = (int(v) for v in mesh.frac_edges[k])
        incid.setdefault(a, []).append(int(k))
        incid.setdefault(b, []).append(int(k))
    ends = [n for n, ks in incid.items() if len(ks) == 1]
    if any(len(ks) > 2 for ks in incid.values()) or len(ends) != 2:
        raise MeshError(f"fracture {fid} edges do not form a simple chain")
    start = min(ends, key=lambda n: (mesh.nodes[n][0], mesh.nodes[n][1]))
    chain, node, prev_edge = [], start, -1
    while True:
        nxt = [k for k in incid[node] if k != prev_edge]
        if not nxt:
            break
        k = nxt[0]
        chain.append(k)
        a, b = (int(v) for v in mesh.frac_edges[k])
        node = b if a == node else a
        prev_edge = k
    if len(chain) != ids.size:
        raise MeshError(f"fracture {fid} edge chain is disconnected")
    return chain


def side_geometry(mesh: Mesh) -> SidesIndex:
    """Build oriented two-sided interface geometry from the tagged edges."""
    nf = mesh.n_frac_edges
    tangent = np.zeros((nf, 2))
    normal = np.zeros((nf, 2))
    tri_side = np.full((nf, 2), -1, dtype=np.int64)
    onodes = np.zeros((nf, 2), dtype=np.int64)
    arc = np.zeros((nf, 2))
    edges = _edge_map(mesh.triangles)
    centroids = mesh.tri_centroids()
    order: list[np.ndarray] = []

    for fid in range(len(mesh.fractures)):
        chain = _fracture_chain(mesh, fid)
        order.append(np.asarray(chain, dtype=np.int64))
        # orient the walk from the lexicographically smallest endpoint
        node = _chain_start(mesh, chain)
        s = 0.0
        for k in chain:
            a, b = (int(v) for v in mesh.frac_edges[k])
            n0, n1 = (a, b) if a == node else (b, a)
            d = mesh.nodes[n1] - mesh.nodes[n0]
            L = float(np.hypot(*d))
            t = d / L
            n_plus = np.array([t[1], -t[0]])
            tangent[k] = t
            normal[k] = n_plus
            onodes[k] = (n0, n1)
            arc[k] = (s, s + L)
            mid = 0.5 * (mesh.nodes[n0] + mesh.nodes[n1])
            adj = edges[tuple(sorted((n0, n1)))]
            if len(adj) != 2:
                raise MeshError(f"fracture edge {(n0, n1)} needs two adjacent triangles")
            signs = [float((centroids[t_] - mid) @ n_plus) for t_ in adj]
            if signs[0] * signs[1] >= 0:
                raise MeshError(f"degenerate side geometry at fracture edge {(n0, n1)}")
            plus = adj[0] if signs[0] < 0 else adj[1]
            minus = adj[1] if plus == adj[0] else adj[0]
            tri_side[k] = (plus, minus)
            s += L
            node = n1
    return SidesIndex(n_fractures=len(mesh.fractures), fe_tangent=tangent,
                      fe_normal=normal, fe_tri=tri_side, fe_nodes=onodes,
                      fe_arc=arc, fracture_order=tuple(order))


def _chain_start(mesh: Mesh, chain: list[int]) -> int:
    incid: dict[int, int] = {}
    for k in chain:
        for n in mesh.frac_edges[k]:
            incid[int(n)] = incid.get(int(n), 0) + 1
    ends = [n for n, c in incid.items() if c == 1]
    return min(ends, key=lambda n: (mesh.nodes[n][0], mesh.nodes[n][1]))


# ---------------------------------------------------------------------------
# mesh file format: "fracflow-mesh v1"
#
#   fracflow-mesh v1
#   NODES <count>
#   <id> <x> <y>
#   CELLS <count>
#   <id> <n1> <n2> <n3> <region>
#   FRACTURE_EDGES <count>
#   <id> <n1> <n2> <fracture_id> <region>
#   BOUNDARY <count>
#   <id> <n1> <n2> <tag>
#
# ids are dense 0-based and must appear in order; tags are the literal
# strings bottom/top/left/right (or the mesh's custom tag names).  Widths
# are not part of the geometry file: the loader takes them as an argument.

FORMAT_HEADER = "fracflow-mesh v1"


def write_mesh(mesh: Mesh, path) -> None:
    lines = [FORMAT_HEADER]
    lines.append(f"NODES {mesh.n_nodes}")
    for i, (x, y) in enumerate(mesh.nodes):
        lines.append(f"{i} {float(x)!r} {float(y)!r}")
    lines.append(f"CELLS {mesh.n_triangles}")
    for i, (tri, reg) in enumerate(zip(mesh.triangles, mesh.tri_region)):
        lines.append(f"{i} {tri[0]} {tri[1]} {tri[2]} {reg}")
    lines.append(f"FRACTURE_EDGES {mesh.n_frac_edges}")
    for i in range(mesh.n_frac_edges):
        a, b = mesh.frac_edges[i]
        lines.append(f"{i} {a} {b} {mesh.frac_edge_fracture[i]} {mesh.frac_edge_region[i]}")
    lines.append(f"BOUNDARY {mesh.boundary_edges.shape[0]}")
    for i, ((a, b), t) in enumerate(zip(mesh.boundary_edges, mesh.boundary_tag)):
        lines.append(f"{i} {a} {b} {mesh.tag_names[int(t)]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_mesh(path, fracture_width: float | dict[int, float] = 0.01) -> Mesh:
    """Load a "fracflow-mesh v1" file.

    Apertures are not stored in the geometry file; ``fracture_width`` is a
    scalar (all fractures) or a dict fracture id -> width.
    """
    with open(path, encoding="utf-8") as fh:
        raw = [ln.strip() for ln in fh]
    lines = [(k + 1, ln) for k, ln in enumerate(raw) if ln and not ln.startswith("#")]
    if not lines or lines[0][1] != FORMAT_HEADER:
        raise MeshError(f"{path}: missing header {FORMAT_HEADER!r}")
    pos = 1

    def section(name: str, ncols: int, parse_tag=False):
        nonlocal pos
        if pos >= len(lines):
            raise MeshError(f"{path}: missing section {name}")
        lineno, header = lines[pos]
        parts = header.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshError(f"{path}:{lineno}: expected '{name} <count>', got {header!r}")
        try:
            count = int(parts[1])
        except ValueError:
            raise MeshError(f"{path}:{lineno}: bad count in {header!r}") from None
        pos += 1
        rows, tags = [], []
        for k in range(count):
            if pos >= len(lines):
                raise MeshError(f"{path}: section {name} truncated")
            lineno, ln = lines[pos]
            cols = ln.split()
            if len(cols) != ncols:
                raise MeshError(f"{path}:{lineno}: expected {ncols} columns in {name}")
            if int(cols[0]) != k:
                raise MeshError(f"{path}:{lineno}: ids must be dense and ordered")
            if parse_tag:
                rows.append(cols[1:-1])
                tags.append(cols[-1])
            else:
                rows.append(cols[1:])
            pos += 1
        return rows, tags

    node_rows, _ = section("NODES", 3)
    cell_rows, _ = section("CELLS", 5)
    fe_rows, _ = section("FRACTURE_EDGES", 5)
    be_rows, be_tags = section("BOUNDARY", 4, parse_tag=True)

    nodes = np.asarray([[float(x), float(y)] for x, y in node_rows])
    cells = np.asarray([[int(v) for v in r] for r in cell_rows],
                       dtype=np.int64).reshape(-1, 4)
    fe = np.asarray([[int(v) for v in r] for r in fe_rows],
                    dtype=np.int64).reshape(-1, 4)
    be = np.asarray([[int(v) for v in r] for r in be_rows],
                    dtype=np.int64).reshape(-1, 2)
    tag_names = BOUNDARY_TAGS
    try:
        btag = np.asarray([tag_names.index(t) for t in be_tags], dtype=np.int64)
    except ValueError:
        tag_names = tuple(dict.fromkeys(be_tags))
        btag = np.asarray([tag_names.index(t) for t in be_tags], dtype=np.int64)

    n_fracs = int(fe[:, 2].max()) + 1 if fe.size else 0
    fractures = []
    for fid in range(n_fracs):
        width = (fracture_width.get(fid) if isinstance(fracture_width, dict)
                 else fracture_width)
        if width is None or width <= 0:
            raise MeshError(f"no positive width supplied for fracture {fid}")
        sel = fe[:, 2] == fid
        pts = nodes[np.unique(fe[sel][:, :2])]
        region = int(fe[sel][:, 3][0]) if sel.any() else 0
        # geometry-only placeholder polyline: chain endpoints
        fractures.append(FractureSpec(polyline=pts[[0, -1]] if len(pts) >= 2 else pts,
                                      width=float(width), region=region))
    mesh = Mesh(nodes=nodes, triangles=cells[:, :3], tri_region=cells[:, 3],
                frac_edges=fe[:, :2], frac_edge_fracture=fe[:, 2],
                frac_edge_region=fe[:, 3],
                boundary_edges=be, boundary_tag=btag, tag_names=tag_names,
                fractures=tuple(fractures), extent=None)
    violations = validate_mesh(mesh)
    if violations:
        raise MeshError(f"{path}: mesh failed validation:\n  " + "\n  ".join(violations))
    return mesh
