"""Residual-driven a posteriori error estimation for hybrid solutions.

Pipeline: truncated residual forces at the mesh nodes -> rescaled mean-zero
nodal field -> zero-boundary Poisson lift phi_h -> estimator
eta_h = ||grad phi_h||_{L2(Omega)}, plus the residual and domain-truncation
indicators that drive the mesh adaptation.
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import tb
from .fem import (FEFunction, assemble_load, assemble_stiffness,
                  element_grad_sq, element_indicators, element_l2_sq,
                  solve_dirichlet)
from .lattice import ResourceError, canonical_triangulation, hat_volumes


def _comps(dim_m):
    # gradient rows are planar or 3D coordinates; anti-plane models keep
    # their single degree of freedom in the third column
    return slice(2, 3) if dim_m == 1 else slice(0, 2)


def default_cutoff(config):
    """Force-truncation radius; eight interatomic spacings is reliable."""
    return 8.0 * config.lattice.r0


def residual_forces(config, params, u, sites, R_c=None, workers=None,
                    clip=False):
    """Truncated residual forces at the given sites, one row per site.

    Each force is the gradient of the band energy of the finite cluster
    B_{R_c}(l) with respect to the centre-atom displacement, evaluated at
    u; the truncation error decays exponentially in R_c.  Evaluations at
    distinct sites are independent and run on a thread pool (the dense
    eigensolves release the interpreter lock).  With clip=True clusters
    are intersected with the generated crystal instead of erroring, which
    turns the truncated force into the exact force of the finite crystal.
    """
    if R_c is None:
        R_c = default_cutoff(config)
    sites = np.atleast_1d(np.asarray(sites, dtype=int))
    dist = np.linalg.norm(config.sites[sites], axis=1)
    if not clip and np.any(dist + R_c > config.lattice.R_gen + 1e-9):
        raise ResourceError("force cluster exceeds the generated lattice; "
                         "increase R_gen or reduce R_c")
    pos_full = tb.embed_positions(config, u)
    shift = tb.make_shift_fn(config)
    comps = _comps(config.dim_m)
    tb.cluster_indices(config, int(sites[0]), R_c)  # prime the site tree

    def one(site):
        cluster = tb.cluster_indices(config, int(site), R_c)
        pos = pos_full[cluster]
        H, pd = tb.assemble_hamiltonian(pos, params, shift,
                                        index_map=cluster)
        sd = tb.spectral_decompose(H, params)
        g, _, _ = tb.weighted_trace_gradient(pos, params,
                                             np.ones(len(cluster)), shift,
                                             index_map=cluster, sd=sd,
                                             pair_data=pd)
        local = int(np.searchsorted(cluster, site))
        return g[local, comps]

    if workers is None:
        workers = min(8, os.cpu_count() or 1)
    if workers > 1 and len(sites) > 8:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, sites))
    else:
        rows = [one(s) for s in sites]
    return np.array(rows)


def truncated_residual_force(config, params, u, site, R_c=None, clip=False):
    """Truncated residual force at a single site (see residual_forces)."""
    return residual_forces(config, params, u, [site], R_c, workers=1,
                           clip=clip)[0]


def support_radius(config, u, R_c=None):
    """Defect distance beyond which truncated forces vanish identically.

    A cluster whose atoms are all undisplaced and which excludes the
    defect core is a perfect hexagonal lattice patch, so the force at its
    centre is zero by symmetry.  That holds once the centre's defect
    distance exceeds both the reach of the displaced atoms and of the
    core, each padded by R_c.
    """
    if R_c is None:
        R_c = default_cutoff(config)
    u = np.asarray(u, dtype=float)
    moved = np.abs(u).max(axis=1) > 0 if u.ndim == 2 else np.abs(u) > 0
    R_u = 0.0
    if moved.any():
        R_u = float(config.defect.dist(config.sites[moved]).max())
    return max(R_u, config.defect.R_def) + R_c + config.lattice.r0


def hat_coefficients(config, sites=None):
    """Reciprocal canonical hat volumes c_l = 1 / integral(zeta_l).

    zeta_l is the P1 hat of site l on the canonical triangulation of the
    full defected crystal, so c_l turns a per-atom force into a density.
    Sites with an undisturbed neighbour shell carry the analytic value
    2/(sqrt(3) r0^2); sites adjacent to the defect get their actual hat
    volume from a local canonical patch.  Cached on the configuration.
    """
    if not hasattr(config, "_hat_coeffs"):
        r0 = config.lattice.r0
        c = np.full(config.n_sites, 2.0 / (np.sqrt(3.0) * r0 ** 2))
        tree = cKDTree(config.sites)
        counts = tree.query_ball_point(config.sites, 1.3 * r0,
                                       return_length=True)
        deficient = np.where(counts < 7)[0]  # self plus six neighbours
        d = np.linalg.norm(config.sites[deficient], axis=1)
        # the rim of the generated region is also neighbour-deficient but
        # keeps its full canonical hat; only core-adjacent sites differ
        deficient = deficient[d <= config.lattice.R_gen - 2.0 * r0]
        if len(deficient):
            R_loc = float(np.linalg.norm(config.sites[deficient],
                                         axis=1).max() + 4.0 * r0)
            patch = canonical_triangulation(config, radius=R_loc)
            vols = hat_volumes(patch)
            pos = {int(s): i for i, s in enumerate(patch.node_sites)}
            for s in deficient:
                c[s] = 1.0 / vols[pos[int(s)]]
        config._hat_coeffs = c
    if sites is None:
        return config._hat_coeffs
    return config._hat_coeffs[np.asarray(sites, dtype=int)]


@dataclass
class ResidualField:
    """Mean-zero rescaled nodal force field on a mesh.

    values = coeffs[:, None] * forces + shift, with the constant shift
    chosen so the field integrates to zero over the mesh domain.  Derived
    fields (prolonged to refined meshes or zero-extended to enlarged
    domains) carry values only; forces and coeffs are then None.
    """

    mesh: object
    values: np.ndarray
    forces: np.ndarray = None
    coeffs: np.ndarray = None
    shift: np.ndarray = None


def build_residual_field(config, params, mesh, u, R_c=None, workers=None,
                         forces=None, clip=False):
    """Rescaled mean-zero residual field on the mesh nodes.

    Nodal values are c_l f_l + C with f_l the truncated residual force,
    c_l the reciprocal canonical hat volume of the node's site and C the
    constant making the field integrate to zero over the mesh domain
    (exact for P1 data through the lumped masses).  Forces are only
    evaluated within the support radius (exactly zero beyond); pass
    precomputed forces to reuse them across meshes.
    """
    ns = mesh.node_sites
    if ns is None or np.any(ns < 0):
        raise ValueError("mesh nodes must all be lattice sites")
    if forces is None:
        live = config.defect.dist(config.sites[ns]) \
            <= support_radius(config, u, R_c)
        forces = np.zeros((len(ns), 1 if config.dim_m == 1 else 2))
        if live.any():
            forces[live] = residual_forces(config, params, u, ns[live],
                                           R_c, workers, clip=clip)
    coeffs = hat_coefficients(config, ns)
    masses = hat_volumes(mesh)
    scaled = coeffs[:, None] * np.asarray(forces, dtype=float)
    shift = -(masses @ scaled) / masses.sum()
    return ResidualField(mesh=mesh, values=scaled + shift, forces=forces,
                         coeffs=coeffs, shift=shift)


@dataclass
class EstimatorReport:
    """Estimator value, its element shares and the quality indicators."""

    eta_h: float
    eta_T: np.ndarray
    rho_T: np.ndarray
    rho_mesh: float
    rho_Omega: float
    rho_total: float
    phi: FEFunction
    n_nodes: int
    n_elements: int
    R_Omega: float
    converged: bool = True
    inner_iters: int = 0
    trace: list = None


def estimate(mesh, field, R_Omega=None):
    """Poisson lift of the residual field and all quality indicators.

    One zero-boundary solve per displacement component gives phi_h and
    eta_h = ||grad phi_h||_{L2(Omega)}; eta_T are its unnormalized element
    shares, so their squares sum to eta_h^2 exactly.  rho_T are the
    element residual indicators; rho_mesh is their root-sum-square (the
    aggregate decays linearly in the mesh size, which is what lets the
    refinement loop reach rho below a fraction of eta_h).  rho_Omega adds
    the domain-truncation contributions from outside B_{R_Omega/2}
    (elements selected by centroid).
    """
    if R_Omega is None:
        R_Omega = mesh.R_Omega
    if R_Omega is None:
        raise ValueError("mesh carries no domain radius")
    values = np.asarray(field.values, dtype=float)
    A = assemble_stiffness(mesh)
    load = assemble_load(mesh, values)
    phi = solve_dirichlet(mesh, A, load)
    e_sq = element_grad_sq(mesh, phi)
    eta_h = float(np.sqrt(e_sq.sum()))
    rho_T = element_indicators(mesh, phi, values)
    centroids = mesh.nodes[mesh.triangles].mean(axis=1)
    outer = np.linalg.norm(centroids, axis=1) > 0.5 * R_Omega
    f_sq = element_l2_sq(mesh, values)
    rho_Omega = float(R_Omega * np.sqrt(f_sq[outer].sum())
                      + np.sqrt(e_sq[outer].sum()))
    rho_mesh = float(np.sqrt((rho_T ** 2).sum()))
    return EstimatorReport(eta_h=eta_h, eta_T=np.sqrt(e_sq), rho_T=rho_T,
                           rho_mesh=rho_mesh, rho_Omega=rho_Omega,
                           rho_total=rho_mesh + rho_Omega,
                           phi=FEFunction(mesh, phi),
                           n_nodes=mesh.n_nodes,
                           n_elements=mesh.n_elements,
                           R_Omega=float(R_Omega))


def dump_report(report, path, per_element=None, extra=None):
    """Write the report as JSON; per-element data goes to a side file."""
    if per_element is None:
        per_element = os.path.splitext(path)[0] + ".elements.txt"
    with open(per_element, "w") as fh:
        fh.write("# element eta_T rho_T\n")
        for i in range(report.n_elements):
            fh.write(f"{i} {report.eta_T[i]:.17g} {report.rho_T[i]:.17g}\n")
    payload = dict(extra or {})
    payload.update(eta_h=report.eta_h, rho_T=report.rho_mesh,
                   rho_Omega=report.rho_Omega, rho_total=report.rho_total,
                   n_nodes=report.n_nodes, n_elements=report.n_elements,
                   R_Omega=report.R_Omega, converged=report.converged,
                   per_element=os.path.basename(per_element))
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
        fh.write("\n")
    return path


def fine_estimator(config, params, u, R_Omega, R_c=None, workers=None,
                   full=False, node_guard=10 ** 5, clip=False):
    """Estimator on the canonical atomistic mesh, forces at every site."""
    n_inside = len(tb.cluster_indices(config, np.zeros(2), R_Omega))
    if n_inside > node_guard:
        raise ResourceError(f"atomistic estimate needs {n_inside} force "
                           f"evaluations, above the guard of {node_guard}")
    mesh = canonical_triangulation(config, radius=R_Omega)
    mesh.R_Omega = float(R_Omega)
    field = build_residual_field(config, params, mesh, u, R_c, workers,
                                 clip=clip)
    report = estimate(mesh, field)
    return report if full else report.eta_h


def evaluate_p1(mesh, values, points, tol=1e-8):
    """Point values of a P1 nodal field at points inside the mesh.

    Candidate elements come from the stars of the nearest mesh nodes; the
    candidate with the largest minimum barycentric coordinate wins, so
    points on edges or vertices evaluate cleanly.
    """
    v = np.asarray(values, dtype=float)
    squeeze = v.ndim == 1
    if squeeze:
        v = v[:, None]
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    t = mesh.triangles
    p0 = mesh.nodes[t[:, 0]]
    e1 = mesh.nodes[t[:, 1]] - p0
    e2 = mesh.nodes[t[:, 2]] - p0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    stars = [[] for _ in range(mesh.n_nodes)]
    for ti, tri in enumerate(t):
        for n in tri:
            stars[n].append(ti)
    k = min(8, mesh.n_nodes)
    _, nearest = cKDTree(mesh.nodes).query(pts, k=k)
    nearest = nearest.reshape(len(pts), -1)
    out = np.empty((len(pts), v.shape[1]))
    for i, x in enumerate(pts):
        cand = {ti for n in nearest[i] for ti in stars[n]}
        best, best_ti, best_bc = -np.inf, -1, None
        for ti in cand:
            dx = x - p0[ti]
            b1 = (dx[0] * e2[ti, 1] - dx[1] * e2[ti, 0]) / det[ti]
            b2 = (e1[ti, 0] * dx[1] - e1[ti, 1] * dx[0]) / det[ti]
            b0 = 1.0 - b1 - b2
            m = min(b0, b1, b2)
            if m > best:
                best, best_ti, best_bc = m, ti, (b0, b1, b2)
        if best < -tol:
            raise ValueError("evaluation point lies outside the mesh")
        out[i] = (best_bc[0] * v[t[best_ti, 0]]
                  + best_bc[1] * v[t[best_ti, 1]]
                  + best_bc[2] * v[t[best_ti, 2]])
    return out[:, 0] if squeeze else out


def oscillation_proxy(config, params, u, mesh, R_c=None, workers=None,
                      field=None, node_guard=10 ** 5):
    """Relative effect of coarse force sampling, via two atomistic solves.

    Compares the atomistic estimator eta_a (forces at every site) against
    the same solve fed with the coarse field prolongated onto the
    atomistic mesh; the gap measures the data oscillation the coarse mesh
    cannot see.  Returns |eta_a - eta_prolong| / eta_a, zero when the
    coarse mesh already resolves every site.
    """
    if mesh.R_Omega is None:
        raise ValueError("mesh carries no domain radius")
    rep_a = fine_estimator(config, params, u, mesh.R_Omega, R_c, workers,
                           full=True, node_guard=node_guard)
    if rep_a.eta_h == 0.0:
        return 0.0
    if field is None:
        field = build_residual_field(config, params, mesh, u, R_c, workers)
    fine_mesh = rep_a.phi.mesh
    values_p = evaluate_p1(mesh, field.values, fine_mesh.nodes)
    rep_p = estimate(fine_mesh, ResidualField(mesh=fine_mesh,
                                              values=values_p))
    return abs(rep_a.eta_h - rep_p.eta_h) / rep_a.eta_h
