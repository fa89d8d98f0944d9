"""Reference crystals, point/line defects, and lattice-function norms.

The homogeneous crystal is a Bravais lattice ``A @ (i, j)`` restricted to a
finite generation radius.  Defected configurations remove sites (vacancy,
micro-crack) or carry a multivalued anti-plane predictor (screw dislocation)
whose branch-cut bookkeeping lives here as well.
"""

import numpy as np
from dataclasses import dataclass, field
from scipy.spatial import Delaunay, cKDTree

# triangular lattice with unit nearest-neighbour spacing
TRI_GENERATOR = np.array([[1.0, 0.5], [0.0, np.sqrt(3.0) / 2.0]])


def cross2(a, b):
    """z-component of the cross product of planar vectors."""
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


class ResourceError(RuntimeError):
    """A computation hit a configured size guard (lattice extent, node or
    element budgets) rather than a numerical failure."""


@dataclass
class LatticeSpec:
    """Bravais generator and generation radius for the reference crystal."""

    generator: np.ndarray = field(default_factory=lambda: TRI_GENERATOR.copy())
    r0: float = 1.0
    R_gen: float = 20.0


@dataclass
class DefectSpec:
    """Defect content of the reference configuration.

    kind: one of "none", "vacancy", "microcrack", "screw".
    removed: integer lattice coordinates of deleted sites.
    core: points in physical space the region radii are measured from.
    R_def: radius of the defect core (removed sites lie inside it).
    burgers: Burgers vector magnitude of the screw (anti-plane slip).
    center: branch point of the screw predictor; must avoid lattice rows.
    """

    kind: str = "none"
    removed: tuple = ()
    core: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))
    R_def: float = 1.0
    burgers: float = 1.0
    center: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @staticmethod
    def none():
        return DefectSpec(kind="none", removed=(), R_def=0.0)

    @staticmethod
    def vacancy():
        return DefectSpec(kind="vacancy", removed=((0, 0),), R_def=1.0)

    @staticmethod
    def microcrack(length=5):
        half = length // 2
        rem = tuple((i, 0) for i in range(-half, length - half))
        return DefectSpec(kind="microcrack", removed=rem, R_def=float(half))

    @staticmethod
    def screw(burgers=1.0, center=None):
        if center is None:
            # centroid of a lattice triangle: off every lattice row, so the
            # branch cut {x2 = c2, x1 >= c1} never hits a site
            center = np.array([0.5, np.sqrt(3.0) / 6.0])
        return DefectSpec(kind="screw", burgers=burgers, R_def=1.0,
                          center=np.asarray(center, dtype=float))

    def dist(self, x):
        """Distance from points x (..., 2) to the defect core."""
        x = np.asarray(x, dtype=float)
        if self.kind == "screw":
            return np.linalg.norm(x - self.center, axis=-1)
        core = np.atleast_2d(self.core)
        d = np.linalg.norm(x[..., None, :] - core, axis=-1)
        return d.min(axis=-1)


class ReferenceConfig:
    """Finite realization of the defected crystal.

    Carries site positions, integer lattice coordinates, the anti-plane
    predictor (zero except for screws) and index tables used by stencil
    gathers.  ``dim_m = 2`` for in-plane displacements, ``1`` for anti-plane.
    """

    def __init__(self, lattice, defect, sites, coords, dim_m):
        self.lattice = lattice
        self.defect = defect
        self.sites = sites
        self.coords = coords
        self.dim_m = dim_m
        self.n_sites = len(sites)
        self._grid = None
        if defect.kind == "screw":
            self.u0 = predictor_u0(defect, sites).reshape(-1, 1)
        else:
            self.u0 = np.zeros((self.n_sites, dim_m))

    def coord_grid(self):
        """Dense (i, j) -> site index table, -1 where no site exists."""
        if self._grid is None:
            c = self.coords
            self._imin = c[:, 0].min()
            self._jmin = c[:, 1].min()
            ni = c[:, 0].max() - self._imin + 1
            nj = c[:, 1].max() - self._jmin + 1
            g = -np.ones((ni, nj), dtype=np.int64)
            g[c[:, 0] - self._imin, c[:, 1] - self._jmin] = np.arange(len(c))
            self._grid = g
        return self._grid

    def lookup(self, coords):
        """Site indices for integer coordinates (K, 2); -1 if absent."""
        g = self.coord_grid()
        coords = np.asarray(coords)
        i = coords[..., 0] - self._imin
        j = coords[..., 1] - self._jmin
        ok = (i >= 0) & (i < g.shape[0]) & (j >= 0) & (j < g.shape[1])
        out = -np.ones(coords.shape[:-1], dtype=np.int64)
        out[ok] = g[i[ok], j[ok]]
        return out

    def neighbor_table(self, offsets):
        """Site indices of coords + offsets: (n_sites, K), -1 for missing."""
        coords = self.coords[:, None, :] + np.asarray(offsets)[None, :, :]
        return self.lookup(coords)


def lattice_ball(generator, radius, center_coord=(0, 0)):
    """Integer coordinates (i, j) with |A (i, j) - A c| <= radius, sorted.

    Sorting is by (squared radius, angle, i, j) which is deterministic and
    groups sites into shells.
    """
    A = np.asarray(generator, dtype=float)
    # conservative integer search box from the inverse generator
    Ainv = np.linalg.inv(A)
    corners = radius * np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float)
    box = np.abs(corners @ Ainv.T).max(axis=0)
    c0, c1 = center_coord
    ii = np.arange(c0 - int(np.ceil(box[0])) - 1, c0 + int(np.ceil(box[0])) + 2)
    jj = np.arange(c1 - int(np.ceil(box[1])) - 1, c1 + int(np.ceil(box[1])) + 2)
    I, J = np.meshgrid(ii, jj, indexing="ij")
    coords = np.stack([I.ravel(), J.ravel()], axis=1)
    pos = coords @ A.T
    cen = np.array(center_coord) @ A.T
    r2 = ((pos - cen) ** 2).sum(axis=1)
    keep = r2 <= radius * radius + 1e-9
    coords, pos, r2 = coords[keep], pos[keep], r2[keep]
    ang = np.mod(np.arctan2(pos[:, 1] - cen[1], pos[:, 0] - cen[0]), 2 * np.pi)
    order = np.lexsort((coords[:, 1], coords[:, 0], np.round(ang, 12),
                        np.round(r2, 9)))
    return coords[order]


def hex_ring(coords):
    """Hexagonal shell index of triangular-lattice coordinates."""
    coords = np.asarray(coords)
    i, j = coords[..., 0], coords[..., 1]
    return (np.abs(i) + np.abs(j) + np.abs(i + j)) // 2


def build_lattice(lattice, defect=None):
    """Generate the finite defected crystal as a ReferenceConfig."""
    if defect is None:
        defect = DefectSpec.none()
    coords = lattice_ball(lattice.generator, lattice.R_gen)
    if defect.removed:
        rem = {tuple(rc) for rc in defect.removed}
        keep = np.array([tuple(c) not in rem for c in coords])
        coords = coords[keep]
    sites = coords @ lattice.generator.T
    if defect.kind in ("vacancy", "microcrack"):
        removed_pos = np.asarray(defect.removed, dtype=float) @ lattice.generator.T
        defect.core = removed_pos
        if np.any(defect.dist(sites) < 1e-9):
            raise ValueError("defect core overlaps remaining sites")
    dim_m = 1 if defect.kind == "screw" else 2
    return ReferenceConfig(lattice, defect, sites, coords, dim_m)


def predictor_u0(defect, x):
    """Anti-plane screw predictor b * arg(x - center) / (2 pi), arg in (0, 2pi)."""
    if defect.kind != "screw":
        return np.zeros(np.asarray(x).shape[:-1])
    x = np.asarray(x, dtype=float)
    d = x - defect.center
    ang = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2.0 * np.pi)
    return defect.burgers * ang / (2.0 * np.pi)


def branch_crossing(defect, p, q):
    """Signed branch-cut crossings of segments p -> q.

    +1 when the segment crosses the cut {x2 = c2, x1 >= c1} going upward,
    -1 going downward, 0 otherwise.  The corrected predictor difference along
    a bond is then u0(q) - u0(p) + burgers * crossing.
    """
    p = np.atleast_2d(p)
    q = np.atleast_2d(q)
    c = defect.center
    dy_p = p[:, 1] - c[1]
    dy_q = q[:, 1] - c[1]
    sign = np.zeros(len(p))
    crosses = dy_p * dy_q < 0.0
    if np.any(crosses):
        t = dy_p[crosses] / (dy_p[crosses] - dy_q[crosses])
        x_hit = p[crosses, 0] + t * (q[crosses, 0] - p[crosses, 0])
        s = np.where(dy_p[crosses] < 0.0, 1.0, -1.0)
        sign[crosses] = np.where(x_hit >= c[0], s, 0.0)
    return sign


def predictor_differences(config, idx_from, idx_to):
    """Branch-corrected predictor differences D u0 along given bonds."""
    d = config.defect
    if d.kind != "screw":
        return np.zeros((len(np.atleast_1d(idx_from)), config.dim_m))
    u0 = config.u0[:, 0]
    raw = u0[idx_to] - u0[idx_from]
    chi = branch_crossing(d, config.sites[idx_from], config.sites[idx_to])
    return (raw + d.burgers * chi).reshape(-1, 1)


def canonical_triangulation(config, radius=None):
    """Delaunay triangulation of the (defected) sites.

    Away from the defect core this coincides with the standard lattice
    triangulation.  Returns an FEMesh over all sites (or sites within
    ``radius`` if given).
    """
    from .fem import FEMesh

    if radius is None:
        nodes = config.sites
        node_sites = np.arange(config.n_sites)
    else:
        node_sites = np.where(np.linalg.norm(config.sites, axis=1)
                              <= radius + 1e-9)[0]
        nodes = config.sites[node_sites]
    tri = Delaunay(nodes)
    simplices = _positively_oriented(nodes, tri.simplices)
    mesh = FEMesh(nodes.copy(), simplices)
    mesh.node_sites = node_sites
    return mesh


def _positively_oriented(nodes, simplices):
    p = nodes[simplices]
    det = cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    out = simplices.copy()
    flip = det < 0
    out[flip, 1], out[flip, 2] = simplices[flip, 2], simplices[flip, 1]
    area = 0.5 * np.abs(det)
    return out[area > 1e-12]


def hat_volumes(mesh):
    """Integral of each P1 hat function (star area / 3)."""
    p = mesh.nodes[mesh.triangles]
    area = 0.5 * np.abs(cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]))
    vol = np.zeros(len(mesh.nodes))
    np.add.at(vol, mesh.triangles.ravel(), np.repeat(area / 3.0, 3))
    return vol


def grad_norm(mesh, values):
    """L2 norm of the gradient of the P1 interpolant of nodal values."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    p = mesh.nodes[mesh.triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    det = cross2(e1, e2)
    area = 0.5 * np.abs(det)
    u = values[mesh.triangles]
    du1 = u[:, 1] - u[:, 0]
    du2 = u[:, 2] - u[:, 0]
    # grad = [du1, du2] @ inv([e1; e2]); inv via adjugate
    gx = (du1 * e2[:, 1, None] - du2 * e1[:, 1, None]) / det[:, None]
    gy = (-du1 * e2[:, 0, None] + du2 * e1[:, 0, None]) / det[:, None]
    return float(np.sqrt((area[:, None] * (gx ** 2 + gy ** 2)).sum()))


def stencil_offsets(generator, radius):
    """Nonzero integer offsets rho with |A rho| <= radius, sorted by length."""
    coords = lattice_ball(generator, radius)
    keep = ~np.all(coords == 0, axis=1)
    return coords[keep]


def decay_seminorm(config, u, gamma=1.0, R_interact=5.0):
    """Exponentially weighted finite-difference seminorm of u.

    sqrt( sum_l sum_{0<|rho|<=R} exp(-2 gamma |rho|) |u(l+rho) - u(l)|^2 )
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    offsets = stencil_offsets(config.lattice.generator, R_interact)
    lens = np.linalg.norm(offsets @ config.lattice.generator.T, axis=1)
    table = config.neighbor_table(offsets)
    total = 0.0
    for k, rho in enumerate(offsets):
        idx = table[:, k]
        ok = idx >= 0
        d = u[idx[ok]] - u[ok]
        total += np.exp(-2.0 * gamma * lens[k]) * (d ** 2).sum()
    return float(np.sqrt(total))


def validate_configuration(config, positions, m_adm=0.5, radius=6.0):
    """Check |y(l) - y(k)| >= m_adm |l - k| on reference pairs within radius.

    Returns (ok, worst_ratio).  positions may have 2 or 3 columns (anti-plane
    configurations carry the out-of-plane coordinate).
    """
    tree = cKDTree(config.sites)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    ref = np.linalg.norm(config.sites[pairs[:, 0]] - config.sites[pairs[:, 1]],
                         axis=1)
    def_d = np.linalg.norm(positions[pairs[:, 0]] - positions[pairs[:, 1]],
                           axis=1)
    ratio = def_d / ref
    worst = float(ratio.min()) if len(ratio) else np.inf
    return worst >= m_adm, worst
