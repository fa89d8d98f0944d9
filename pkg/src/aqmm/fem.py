"""P1 finite elements on graded lattice meshes.

Meshes combine an atomistic zone (every site a node) with coarse rings whose
spacing grows linearly with radius; all nodes are lattice sites.  Refinement
is newest-vertex bisection with conformity closure; the outer domain can be
expanded by zipping new graded rings onto the current boundary polygon.
Element vertex order keeps the refinement edge opposite vertex 0.
"""

import numpy as np
from dataclasses import dataclass
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import splu
from scipy.spatial import Delaunay

from .lattice import ResourceError, cross2

ATOMISTIC, COARSE = 0, 1


class FEMesh:
    """Conforming triangle mesh with per-element provenance tags."""

    def __init__(self, nodes, triangles, tags=None, R_Omega=None):
        self.nodes = np.asarray(nodes, dtype=float)
        self.triangles = np.asarray(triangles, dtype=int)
        if tags is None:
            tags = np.zeros(len(self.triangles), dtype=np.int8)
        self.tags = np.asarray(tags, dtype=np.int8)
        self.R_Omega = R_Omega
        self.node_sites = None
        self._edge_cache = None

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_elements(self):
        return len(self.triangles)

    def areas(self):
        p = self.nodes[self.triangles]
        return 0.5 * cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])

    def element_diameters(self):
        p = self.nodes[self.triangles]
        e = np.stack([np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
                      np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
                      np.linalg.norm(p[:, 1] - p[:, 0], axis=1)], axis=1)
        return e.max(axis=1)

    def edge_data(self):
        """Unique edges, per-element edge ids, and edge->element adjacency.

        Edge k of an element is opposite its vertex k.  Returns a dict with
        edges (E,2), tri_edges (m,3), edge_tri (E,2; -1 on boundary),
        lengths (E,), boundary_node flags (n,).
        """
        if self._edge_cache is not None:
            return self._edge_cache
        t = self.triangles
        raw = np.concatenate([t[:, [1, 2]], t[:, [2, 0]], t[:, [0, 1]]])
        raw_sorted = np.sort(raw, axis=1)
        edges, inv = np.unique(raw_sorted, axis=0, return_inverse=True)
        m = len(t)
        tri_edges = inv.reshape(3, m).T
        edge_tri = -np.ones((len(edges), 2), dtype=int)
        order = np.argsort(inv, kind="stable")
        elems = np.tile(np.arange(m), 3)[order]
        eids = inv[order]
        first = np.ones(len(eids), dtype=bool)
        first[1:] = eids[1:] != eids[:-1]
        edge_tri[eids[first], 0] = elems[first]
        second = ~first
        edge_tri[eids[second], 1] = elems[second]
        lengths = np.linalg.norm(self.nodes[edges[:, 0]]
                                 - self.nodes[edges[:, 1]], axis=1)
        boundary_edge = edge_tri[:, 1] < 0
        boundary_node = np.zeros(self.n_nodes, dtype=bool)
        boundary_node[edges[boundary_edge].ravel()] = True
        self._edge_cache = dict(edges=edges, tri_edges=tri_edges,
                                edge_tri=edge_tri, lengths=lengths,
                                boundary_edge=boundary_edge,
                                boundary_node=boundary_node)
        return self._edge_cache

    def boundary_nodes(self):
        return self.edge_data()["boundary_node"]

    def min_angle(self):
        p = self.nodes[self.triangles]
        a = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
        b = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
        c = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
        angles = []
        for x, y, z in ((a, b, c), (b, c, a), (c, a, b)):
            cosx = np.clip((y ** 2 + z ** 2 - x ** 2) / (2 * y * z), -1, 1)
            angles.append(np.arccos(cosx))
        return float(np.degrees(np.min(angles)))

    def boundary_cycle(self):
        """Outer boundary nodes ordered counter-clockwise by angle."""
        ed = self.edge_data()
        nodes = np.unique(ed["edges"][ed["boundary_edge"]])
        ang = np.arctan2(self.nodes[nodes, 1], self.nodes[nodes, 0])
        return nodes[np.argsort(ang, kind="stable")]

    def conforming(self):
        """Audit: every interior edge shared by exactly 2 elements and node
        sets of adjacent elements agree along it."""
        ed = self.edge_data()
        counts = (ed["edge_tri"] >= 0).sum(axis=1)
        return bool(np.all((counts == 1) | (counts == 2)))


@dataclass
class FEFunction:
    mesh: FEMesh
    values: np.ndarray


def set_refinement_edges(triangles, nodes):
    """Rotate vertex order so the longest edge sits opposite vertex 0."""
    t = np.asarray(triangles, dtype=int)
    p = nodes[t]
    lens = np.stack([np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
                     np.linalg.norm(p[:, 0] - p[:, 2], axis=1),
                     np.linalg.norm(p[:, 1] - p[:, 0], axis=1)], axis=1)
    c = np.argmax(lens, axis=1)
    out = t.copy()
    for k in (1, 2):
        rows = c == k
        out[rows] = np.roll(t[rows], -k, axis=1)
    return out


def _hex_rings(config):
    from .lattice import hex_ring

    if not hasattr(config, "_hex_ring_cache"):
        config._hex_ring_cache = hex_ring(config.coords)
    return config._hex_ring_cache


def _hex_ring_nodes(config, ring, count=None, stagger=0):
    """Site indices on one hexagonal ring, equally subsampled.

    ``count`` nodes (multiple of 6, or the full ring when None or too large)
    are spread around the cycle starting at a corner; stagger=1 shifts by
    half a spacing.  Unstaggered sampling lands exactly on the six corners,
    which keeps the convex hull hexagonal for boundary rings.  Staggering
    alternate interior rings breaks the radial node alignment that otherwise
    produces degenerate triangles.
    """
    ring_idx = np.where(_hex_rings(config) == ring)[0]
    if ring == 0 or len(ring_idx) == 0:
        return ring_idx
    ang = np.arctan2(config.sites[ring_idx, 1], config.sites[ring_idx, 0])
    ring_idx = ring_idx[np.argsort(ang, kind="stable")]
    n = len(ring_idx)
    if count is None or count >= n:
        return ring_idx
    count = max(6, 6 * int(round(count / 6)))
    if count >= n:
        return ring_idx
    r = np.linalg.norm(config.sites[ring_idx], axis=1)
    corners = np.sort(np.where(r >= r.max() - 1e-9)[0])
    start = corners[0] if len(corners) else 0
    offs = np.round((np.arange(count) + 0.5 * stagger) * n / count)
    keep = np.unique((start + offs.astype(int)) % n)
    return ring_idx[keep]


def _ring_plan(k_first, k_last, k_mm, grade):
    """Graded ring plan from k_first to k_last with a fine interface band.

    Returns a sorted list of (ring, count, stagger): node count per ring
    (None = full), with alternating half-spacing stagger anchored so the
    outermost ring is unstaggered (its corners must lie on the hull).
    """
    ks = {k_first, k_last}
    k = k_first
    while k < k_last:
        gap = max(1, int(np.floor(grade * k)))
        nxt = k + gap
        # absorb a too-thin final strip into the previous gap
        if nxt >= k_last or k_last - nxt <= max(1, int(np.floor(
                grade * nxt))) // 2:
            nxt = k_last
        ks.add(nxt)
        k = nxt
    for kk in (k_mm - 1, k_mm, k_mm + 1):
        if k_first <= kk <= k_last:
            ks.add(kk)
    ks = sorted(ks)
    plan = []
    for j, k in enumerate(ks):
        if abs(k - k_mm) <= 1:
            count = None
        else:
            step = max(1, int(np.floor(grade * k)))
            count = 6 * max(3, int(round(k / step)))
        stagger = (len(ks) - 1 - j) % 2
        plan.append((k, count, stagger))
    return plan


def _select_mesh_sites(config, R_atom, R_MM, R_Omega, grade):
    """Graded lattice-site selection for the combined triangulation."""
    a = config.lattice.r0
    row = a * np.sqrt(3.0) / 2.0
    d = config.defect.dist(config.sites)
    chosen = [np.where(d <= R_atom + 1e-9)[0]]
    k_atom = int(np.ceil((R_atom + a) / row))
    k_mm = int(round(R_MM / row))
    k_last = int(np.ceil(R_Omega / row))
    if k_last * a > config.lattice.R_gen + 1e-9:
        raise ResourceError("outer hexagon exceeds generated lattice; "
                           "increase R_gen")
    for k, count, stagger in _ring_plan(k_atom, k_last, k_mm, grade):
        chosen.append(_hex_ring_nodes(config, k, count, stagger))
    idx = np.unique(np.concatenate(chosen))
    return idx, k_last * row


def build_initial_mesh(config, decomp, R_Omega, grade=0.25, R_atom=None):
    """Combined triangulation: atomistic core plus graded coarse rings.

    All nodes are lattice sites; the boundary is the convex hull of the
    outermost hexagonal ring, inscribed radius >= R_Omega.  Degenerate or
    sliver output triggers up to 3 retries with halved grading.  The
    atomistic zone reaches two spacings past R_MM by default: residual
    forces stay large up to the MM/FF interface and die off quickly
    beyond it, so coarse sampling is safe only outside that band.
    """
    if R_Omega <= decomp.R_MM + 2.0:
        raise ValueError("R_Omega must exceed R_MM + 2")
    if R_atom is None:
        R_atom = decomp.R_MM + 2.0 * config.lattice.r0
    g = grade
    for attempt in range(3):
        sites_idx, _ = _select_mesh_sites(config, R_atom, decomp.R_MM,
                                          R_Omega, g)
        nodes = config.sites[sites_idx]
        tri = Delaunay(nodes)
        simplices = _oriented(nodes, tri.simplices)
        mesh = FEMesh(nodes, set_refinement_edges(simplices, nodes),
                      R_Omega=R_Omega)
        mesh.node_sites = sites_idx
        d = config.defect.dist(nodes)
        vert_atom = d[mesh.triangles] <= R_atom + 1e-9
        mesh.tags = np.where(vert_atom.all(axis=1), ATOMISTIC,
                             COARSE).astype(np.int8)
        if mesh.min_angle() >= 15.0:
            return mesh
        g *= 0.5
    raise RuntimeError("graded ring selection kept producing slivers")


def _oriented(nodes, simplices):
    p = nodes[simplices]
    det = cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    out = simplices.copy()
    flip = det < 0
    out[flip, 1], out[flip, 2] = simplices[flip, 2], simplices[flip, 1]
    area = 0.5 * np.abs(det)
    return out[area > 1e-12]


def assemble_stiffness(mesh):
    """Sparse P1 stiffness matrix over all nodes (no rows eliminated)."""
    t = mesh.triangles
    p = mesh.nodes[t]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = cross2(e1, e2)
    area = 0.5 * np.abs(det)
    if np.any(area < 1e-12):
        raise ValueError("degenerate element in stiffness assembly")
    # gradients of barycentric coordinates
    g = np.empty((len(t), 3, 2))
    g[:, 1, 0] = e2[:, 1] / det
    g[:, 1, 1] = -e2[:, 0] / det
    g[:, 2, 0] = -e1[:, 1] / det
    g[:, 2, 1] = e1[:, 0] / det
    g[:, 0] = -g[:, 1] - g[:, 2]
    ke = np.einsum("tid,tjd->tij", g, g) * area[:, None, None]
    rows = np.repeat(t, 3, axis=1).reshape(-1)
    cols = np.tile(t, (1, 3)).reshape(-1)
    A = coo_matrix((ke.reshape(-1), (rows, cols)),
                   shape=(mesh.n_nodes, mesh.n_nodes))
    return A.tocsr()


def assemble_load(mesh, f_nodal):
    """Load vector ∫ f v for P1 data f via the exact consistent mass rule."""
    f = np.asarray(f_nodal, dtype=float)
    squeeze = f.ndim == 1
    if squeeze:
        f = f[:, None]
    t = mesh.triangles
    area = np.abs(mesh.areas())
    fv = f[t]                                  # (m, 3, c)
    mloc = (np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]])
            / 12.0)
    le = np.einsum("ij,mjc->mic", mloc, fv) * area[:, None, None]
    out = np.zeros_like(f)
    np.add.at(out, t.reshape(-1), le.reshape(-1, f.shape[1]))
    return out[:, 0] if squeeze else out


def solve_dirichlet(mesh, A, load):
    """Solve A phi = load with zero boundary values; relative residual 1e-10."""
    load = np.asarray(load, dtype=float)
    squeeze = load.ndim == 1
    b = load[:, None] if squeeze else load
    free = ~mesh.boundary_nodes()
    phi = np.zeros_like(b)
    Aff = A[free][:, free].tocsc()
    lu = splu(Aff)
    for c in range(b.shape[1]):
        phi[free, c] = lu.solve(b[free, c])
    res = np.linalg.norm(Aff @ phi[free] - b[free])
    if res > 1e-10 * max(np.linalg.norm(b[free]), 1e-300):
        raise RuntimeError("Dirichlet solve residual above tolerance")
    return phi[:, 0] if squeeze else phi


def element_gradients(mesh, values):
    """Constant per-element gradient of a P1 function, componentwise."""
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    t = mesh.triangles
    p = mesh.nodes[t]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = cross2(e1, e2)
    u = v[t]
    du1 = u[:, 1] - u[:, 0]
    du2 = u[:, 2] - u[:, 0]
    gx = (du1 * e2[:, 1, None] - du2 * e1[:, 1, None]) / det[:, None]
    gy = (-du1 * e2[:, 0, None] + du2 * e1[:, 0, None]) / det[:, None]
    return np.stack([gx, gy], axis=1)          # (m, 2, c)


def element_grad_sq(mesh, values):
    """Per-element integral of |grad of the P1 interpolant|^2."""
    grad = element_gradients(mesh, values)
    area = np.abs(mesh.areas())
    return area * (grad ** 2).sum(axis=(1, 2))


def _p1_sq_integral(area, fv):
    """Exact ∫_T |f|^2 for P1 data with vertex values fv (m, 3, c)."""
    s = (fv ** 2).sum(axis=1) + fv[:, 0] * fv[:, 1] \
        + fv[:, 0] * fv[:, 2] + fv[:, 1] * fv[:, 2]
    return area / 6.0 * s.sum(axis=-1)


def element_l2_sq(mesh, f_nodal):
    """Per-element integral of |f|^2 for P1 nodal data."""
    f = np.asarray(f_nodal, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    return _p1_sq_integral(np.abs(mesh.areas()), f[mesh.triangles])


def element_indicators(mesh, phi, f_nodal):
    """Residual indicators rho_{h,T}; P1 leaves only the data and jump terms.

    rho_{h,T}^2 = h_T^2 ||f||_{L2(T)}^2
                + 1/2 sum_{interior e in dT} h_e ||[d phi/dn]||_{L2(e)}^2
    """
    f = np.asarray(f_nodal, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    area = np.abs(mesh.areas())
    hT = mesh.element_diameters()
    vol = hT ** 2 * _p1_sq_integral(area, f[mesh.triangles])
    grad = element_gradients(mesh, phi)        # (m, 2, c)
    ed = mesh.edge_data()
    et = ed["edge_tri"]
    interior = ~ed["boundary_edge"]
    ev = mesh.nodes[ed["edges"][:, 1]] - mesh.nodes[ed["edges"][:, 0]]
    h_e = ed["lengths"]
    n_e = np.stack([ev[:, 1], -ev[:, 0]], axis=1) / h_e[:, None]
    jump = np.zeros(len(h_e))
    gi = grad[et[interior, 0]] - grad[et[interior, 1]]
    jn = np.einsum("mdc,md->mc", gi, n_e[interior])
    jump[interior] = (jn ** 2).sum(axis=1)
    # ||[d phi/dn]||^2 over e = jump^2 * h_e (piecewise-constant gradients)
    edge_term = h_e ** 2 * jump
    contrib = np.zeros(mesh.n_elements)
    for k in range(2):
        rows = et[interior, k]
        np.add.at(contrib, rows, 0.5 * edge_term[interior])
    return np.sqrt(vol + contrib)


def bisect_refine(mesh, marked, max_elements=10 ** 6):
    """Newest-vertex bisection of the marked elements plus closure.

    Returns (mesh, parent, edge_midpoints): per-element parent indices and a
    dict mapping split edges to their midpoint node index, used to prolong
    nodal fields.
    """
    marked = np.atleast_1d(np.asarray(marked, dtype=int))
    if len(marked) == 0:
        raise ValueError("no elements marked")
    t = mesh.triangles
    ed = mesh.edge_data()
    tri_edges = ed["tri_edges"]
    edge_tri = ed["edge_tri"]
    ref_edge = tri_edges[:, 0]                 # opposite vertex 0
    edge_marked = np.zeros(len(ed["edges"]), dtype=bool)
    from collections import deque

    queue = deque(marked.tolist())
    while queue:
        el = queue.popleft()
        e = ref_edge[el]
        if edge_marked[e]:
            continue
        edge_marked[e] = True
        for nb in edge_tri[e]:
            if nb >= 0 and not edge_marked[ref_edge[nb]]:
                queue.append(nb)

    n_nodes = mesh.n_nodes
    split = np.where(edge_marked)[0]
    midpoint = {}
    new_nodes = []
    for e in split:
        a, b = ed["edges"][e]
        midpoint[e] = n_nodes + len(new_nodes)
        new_nodes.append(0.5 * (mesh.nodes[a] + mesh.nodes[b]))
    nodes = np.vstack([mesh.nodes, np.array(new_nodes).reshape(-1, 2)])

    out_tris = []
    out_tags = []
    out_parent = []

    def emit(tri, el):
        out_tris.append(tri)
        out_tags.append(mesh.tags[el])
        out_parent.append(el)

    for el in range(len(t)):
        v0, v1, v2 = t[el]
        e0, e1, e2 = tri_edges[el]             # opposite v0, v1, v2
        if not edge_marked[e0]:
            emit((v0, v1, v2), el)
            continue
        m0 = midpoint[e0]
        # the children's refinement edges are the former edges (v0,v1), (v2,v0)
        for child, eid in (((m0, v0, v1), e2), ((m0, v2, v0), e1)):
            if edge_marked[eid]:
                mm = midpoint[eid]
                a, b, c = child
                emit((mm, a, b), el)
                emit((mm, c, a), el)
            else:
                emit(child, el)
        if len(out_tris) > max_elements:
            raise ResourceError("refinement cascade exceeded element budget")

    new_mesh = FEMesh(nodes, np.array(out_tris, dtype=int),
                      np.array(out_tags, dtype=np.int8), R_Omega=mesh.R_Omega)
    if mesh.node_sites is not None:
        ns = np.full(len(nodes), -1, dtype=int)
        ns[:len(mesh.node_sites)] = mesh.node_sites
        new_mesh.node_sites = ns
    mid_pairs = {tuple(sorted(ed["edges"][e])): midpoint[e] for e in split}
    return new_mesh, np.array(out_parent, dtype=int), mid_pairs


def prolong(values, mesh_old, mesh_new, mid_pairs):
    """Carry nodal values to a bisected mesh (midpoint averaging)."""
    v = np.asarray(values, dtype=float)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[:, None]
    out = np.zeros((mesh_new.n_nodes, v.shape[1]))
    out[:mesh_old.n_nodes] = v
    for (a, b), m in mid_pairs.items():
        out[m] = 0.5 * (v[a] + v[b])
    return out[:, 0] if squeeze else out


def _tri_quality(points, t):
    """Sine of the minimum interior angle; non-positive when clockwise."""
    pa, pb, pc = points[t[0]], points[t[1]], points[t[2]]
    v1, v2, v3 = pb - pa, pc - pb, pa - pc
    area2 = v1[0] * v2[1] - v1[1] * v2[0]
    if area2 <= 0.0:
        return area2
    l1 = np.hypot(v1[0], v1[1])
    l2 = np.hypot(v2[0], v2[1])
    l3 = np.hypot(v3[0], v3[1])
    return area2 / max(l1 * l2, l2 * l3, l3 * l1, 1e-300)


def _zip_cycles(inner_idx, outer_idx, points):
    """Triangulate the strip between two angularly ordered node cycles.

    Merges the cycles by advancing whichever has the smaller next angle,
    producing len(inner) + len(outer) conforming triangles.
    """
    inner = np.asarray(inner_idx)
    outer = np.asarray(outer_idx)
    th_i = np.arctan2(points[inner, 1], points[inner, 0])
    th_o = np.arctan2(points[outer, 1], points[outer, 0])
    inner = inner[np.argsort(th_i, kind="stable")]
    base = np.sort(th_i)[0]
    ti = np.sort(th_i) - base
    to_rel = (th_o - base) % (2 * np.pi)
    oo = np.argsort(to_rel, kind="stable")
    outer = outer[oo]
    to = to_rel[oo]
    ni, no = len(inner), len(outer)

    def ang_i(k):
        return ti[k % ni] + 2 * np.pi * (k // ni)

    def ang_o(k):
        return to[k % no] + 2 * np.pi * (k // no)

    tris = []
    i, j = 0, 0
    while i < ni or j < no:
        if i < ni and (j >= no or ang_i(i + 1) <= ang_o(j + 1)):
            tris.append((inner[i % ni], outer[j % no], inner[(i + 1) % ni]))
            i += 1
        else:
            tris.append((outer[j % no], outer[(j + 1) % no], inner[i % ni]))
            j += 1
    return np.array(tris, dtype=int)


def _flip_improve(triangles, points, max_passes=60):
    """Lawson-style edge flips that raise the local minimum angle.

    Only edges interior to the given patch are flipped, so its boundary
    (and hence conformity with the surrounding mesh) is untouched.  The
    angular cycle merge leaves slivers near hexagon corners where an outer
    node lies on the extension of an inner edge; flipping their shared
    diagonal removes them.
    """
    tris = [tuple(t) for t in np.asarray(triangles, dtype=int)]
    for _ in range(max_passes):
        emap = {}
        for ti, t in enumerate(tris):
            for k in range(3):
                u, v = t[(k + 1) % 3], t[(k + 2) % 3]
                key = (u, v) if u < v else (v, u)
                emap.setdefault(key, []).append((ti, k))
        changed = False
        touched = set()
        for (u, v), lst in emap.items():
            if len(lst) != 2:
                continue
            (t1, k1), (t2, k2) = lst
            if t1 in touched or t2 in touched:
                continue
            c = tris[t1][k1]
            d = tris[t2][k2]
            q_cur = min(_tri_quality(points, tris[t1]),
                        _tri_quality(points, tris[t2]))
            # orient the shared edge as it appears in t1: (a -> b -> c) ccw
            a, b = tris[t1][(k1 + 1) % 3], tris[t1][(k1 + 2) % 3]
            n1 = (a, d, c)
            n2 = (d, b, c)
            q_new = min(_tri_quality(points, n1), _tri_quality(points, n2))
            if q_new > q_cur + 1e-12:
                tris[t1] = n1
                tris[t2] = n2
                touched.update((t1, t2))
                changed = True
        if not changed:
            break
    return np.array(tris, dtype=int)


def expand_domain(mesh, config, theta=1.0, grade=0.25):
    """Append graded rings so the domain radius grows to (1+theta) R_Omega.

    Old elements are preserved bit-identically; the annulus is zipped ring by
    ring onto the current boundary cycle, keeping the mesh conforming.
    """
    R_new = (1.0 + theta) * mesh.R_Omega
    a = config.lattice.r0
    row = a * np.sqrt(3.0) / 2.0
    k_last = int(np.ceil(R_new / row))
    if k_last * a > config.lattice.R_gen + 1e-9:
        raise ResourceError("domain expansion exceeds generated lattice; "
                           "increase R_gen")
    rings = _hex_rings(config)
    cycle = mesh.boundary_cycle()
    bd_sites = mesh.node_sites[cycle]
    k_start = int(rings[bd_sites[bd_sites >= 0]].max())
    ks = []
    k = k_start
    while k < k_last:
        gap = max(1, int(np.floor(grade * k)))
        nxt = k + gap
        # absorb a too-thin final strip into the previous gap
        if nxt >= k_last or k_last - nxt <= max(1, int(np.floor(
                grade * nxt))) // 2:
            nxt = k_last
        ks.append(nxt)
        k = nxt
    # ring node counts: graded target, but never coarsen by more than 2x per
    # strip relative to the current boundary density; boundary unstaggered
    counts = []
    prev_count = len(cycle)
    for k in ks:
        step = max(1, int(np.floor(grade * k)))
        target = 6 * max(3, int(round(k / step)))
        c = max(target, 6 * int(np.ceil(prev_count / 12.0)))
        counts.append(c)
        prev_count = c
    staggers = [j % 2 for j in range(1, len(ks) + 1)]
    if staggers:
        staggers[-1] = 0
        if len(staggers) >= 2 and staggers[-2] == 0:
            staggers[-2] = 1

    nodes = mesh.nodes
    node_sites = mesh.node_sites.copy()
    tris = [mesh.triangles]
    tags = [mesh.tags]
    inner_cycle = cycle
    for k, count, stagger in zip(ks, counts, staggers):
        ring_sites = _hex_ring_nodes(config, k, count, stagger)
        new_ids = np.arange(len(nodes), len(nodes) + len(ring_sites))
        nodes = np.vstack([nodes, config.sites[ring_sites]])
        node_sites = np.concatenate([node_sites, ring_sites])
        strip = _zip_cycles(inner_cycle, new_ids, nodes)
        strip = _flip_improve(strip, nodes)
        strip = _oriented(nodes, strip)
        tris.append(set_refinement_edges(strip, nodes))
        tags.append(np.full(len(strip), COARSE, dtype=np.int8))
        inner_cycle = new_ids
    out = FEMesh(nodes, np.vstack(tris), np.concatenate(tags),
                 R_Omega=R_new)
    out.node_sites = node_sites
    return out


def dump_mesh(prefix, mesh):
    with open(prefix + ".nodes.txt", "w") as fh:
        for i, (x, y) in enumerate(mesh.nodes):
            fh.write(f"{i} {x:.17g} {y:.17g}\n")
    with open(prefix + ".tris.txt", "w") as fh:
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k}\n")


def load_mesh(prefix):
    nd = np.loadtxt(prefix + ".nodes.txt", ndmin=2)
    tr = np.loadtxt(prefix + ".tris.txt", dtype=int, ndmin=2)
    return FEMesh(nd[:, 1:3], tr)


def dump_field(path, values):
    v = np.asarray(values, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    with open(path, "w") as fh:
        for i, row in enumerate(v):
            fh.write(str(i) + " " + " ".join(f"{x:.17g}" for x in row) + "\n")


def load_field(path):
    data = np.loadtxt(path, ndmin=2)
    vals = data[:, 1:]
    return vals[:, 0] if vals.shape[1] == 1 else vals
