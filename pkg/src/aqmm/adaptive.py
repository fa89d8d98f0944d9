"""Adaptive control loops for the hybrid model and its error estimator.

Inner loop (adaptive_estimate): refine and expand the estimation mesh
until the computable residual indicators certify the Poisson lift, so
the reported eta_h carries a quality guarantee rho_h < tau_est eta_h.
Outer loop (run_driver): equilibrate the hybrid model, estimate, mark
the dominant error carriers, grow the QM/MM regions they point at, and
repeat until eta_h falls below its tolerance.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import hybrid, tb
from .estimator import ResidualField, build_residual_field, estimate, \
    residual_forces, support_radius
from .fem import bisect_refine, build_initial_mesh, expand_domain, prolong
from .lattice import ResourceError, validate_configuration

TRACE_COLUMNS = ("outer_iter", "R_QM", "R_MM", "R_Omega", "N_QM", "N_MM",
                 "eta_h", "rho_h", "eta_a", "err_ref", "inner_iters",
                 "seconds")


@dataclass
class AdaptiveConfig:
    """Tolerances, marking parameters and initial radii for the driver."""

    eta_tol: float
    tau_D: float = 0.3
    tau_est: float = 0.3
    Theta: float = 0.5
    R_QM: float = 3.0
    # buffer width sets the seam accuracy of the QM site energies
    # (per-site error ~ exp(-gamma R_BUF) over a band that lengthens with
    # R_QM); it must stay wide enough that this floor sits below the clamp
    # and Taylor errors the outer loop actually reduces
    R_BUF: float = 5.0
    R_MM: float = 10.0
    R_Omega: float = 16.0
    R_c: float = None
    g_tol: float = 1e-6
    max_outer: int = 12
    max_inner: int = 40
    grade: float = 0.25
    dorfler_squared: bool = False

    def __post_init__(self):
        if not self.eta_tol > 0:
            raise ValueError("eta_tol must be positive")
        if not 0 < self.tau_D < 1:
            raise ValueError("tau_D must lie in (0, 1)")
        if not 0 < self.Theta < 1:
            raise ValueError("Theta must lie in (0, 1)")
        if not self.tau_est > 0:
            raise ValueError("tau_est must be positive")
        if not self.R_QM < self.R_QM + self.R_BUF < self.R_MM:
            raise ValueError("radii must satisfy R_QM < R_QM + R_BUF < R_MM")
        if not self.R_Omega > self.R_MM + 2.0:
            raise ValueError("R_Omega must exceed R_MM + 2")

    def expansion_factor(self, d=2):
        """Domain growth theta = Theta^(-d/2) - 1, so one expansion is
        expected to scale the truncation indicator by Theta."""
        return self.Theta ** (-d / 2.0) - 1.0


@dataclass
class AdaptiveTrace:
    """Per-outer-iteration records of an adaptive run."""

    rows: list
    converged: bool
    stalled: bool = False
    u: np.ndarray = None
    decomp: object = None
    report: object = None
    displacements: list = field(default_factory=list)

    def radii(self):
        return [(r["R_QM"], r["R_MM"], r["R_Omega"]) for r in self.rows]


def dorfler_mark(indicators, tau_D=0.3, squared=False):
    """Minimal element set whose indicator sum reaches tau_D of the total.

    Indicators enter to first power by default (squared=True switches to
    the squared convention).  Sorting is descending with ties broken by
    element index; all-zero indicators return an empty mark, which the
    caller treats as a convergence stall.
    """
    ind = np.asarray(indicators, dtype=float)
    if ind.size == 0 or not np.any(ind > 0):
        return np.array([], dtype=int)
    vals = ind ** 2 if squared else ind
    order = np.argsort(-vals, kind="stable")
    csum = np.cumsum(vals[order])
    total = csum[-1]
    k = int(np.searchsorted(csum, tau_D * total * (1.0 - 1e-12)))
    return np.sort(order[:k + 1])


def _edge_neighbours(mesh):
    """Element adjacency lists across shared edges."""
    ed = mesh.edge_data()
    nbr = [[] for _ in range(mesh.n_elements)]
    for a, b in ed["edge_tri"]:
        if a >= 0 and b >= 0:
            nbr[a].append(b)
            nbr[b].append(a)
    return ed, nbr


def classify_marks(config, marked, mesh, decomp):
    """Split marked elements into QM-attributable and MM parts.

    Seeds are marked elements containing, or edge-adjacent to an element
    containing, a node on the QM u BUF / MM interface, plus marked elements
    lying wholly inside the QM u BUF zone (interior marks measure the
    finite-cluster truncation of the quantum site energies, which only a
    larger QM zone shrinks); the QM part grows from the seeds through
    edge-adjacent marked elements, the remainder drives the MM region.
    """
    marked = np.asarray(marked, dtype=int)
    d = config.defect.dist(mesh.nodes)
    qmbuf = d <= decomp.R_QM + decomp.R_BUF + 1e-9
    ed, nbr = _edge_neighbours(mesh)
    edges = ed["edges"]
    crossing = qmbuf[edges[:, 0]] != qmbuf[edges[:, 1]]
    iface_node = np.zeros(mesh.n_nodes, dtype=bool)
    iface_node[edges[crossing].ravel()] = True
    has_iface = iface_node[mesh.triangles].any(axis=1)
    interior = qmbuf[mesh.triangles].all(axis=1)

    marked_set = np.zeros(mesh.n_elements, dtype=bool)
    marked_set[marked] = True
    seeds = [int(el) for el in marked
             if has_iface[el] or interior[el]
             or any(has_iface[nb] for nb in nbr[el])]
    reached = np.zeros(mesh.n_elements, dtype=bool)
    stack = list(seeds)
    while stack:
        el = stack.pop()
        if reached[el]:
            continue
        reached[el] = True
        for nb in nbr[el]:
            if marked_set[nb] and not reached[nb]:
                stack.append(nb)
    M_QM = marked[reached[marked]]
    M_MM = marked[~reached[marked]]
    return M_QM, M_MM


def refine_regions(config, M_QM, M_MM, mesh, decomp, shell=None):
    """Grow the region radii to cover the marked elements.

    Each marked zone's new radius is the largest defect distance over the
    nearest lattice sites of its elements' vertices (bisection midpoints
    are sub-lattice), clamped to grow by at least one lattice shell; the
    MM radius is kept strictly beyond the buffered QM zone.
    """
    if len(M_QM) == 0 and len(M_MM) == 0:
        raise ValueError("no marked elements to refine from")
    if shell is None:
        shell = config.lattice.r0
    tree = cKDTree(config.sites)

    def reach(els):
        verts = np.unique(mesh.triangles[np.asarray(els, dtype=int)].ravel())
        _, sites = tree.query(mesh.nodes[verts])
        return float(config.defect.dist(config.sites[sites]).max())

    R_QM, R_MM = decomp.R_QM, decomp.R_MM
    if len(M_QM):
        R_QM = max(reach(M_QM), R_QM + shell)
    if len(M_MM):
        R_MM = max(reach(M_MM), R_MM + shell)
    if R_MM <= R_QM + decomp.R_BUF:
        R_MM = R_QM + decomp.R_BUF + shell
    if R_MM >= config.lattice.R_gen:
        raise ResourceError(
            f"region growth to R_MM = {R_MM:.1f} exceeds the generated "
            f"lattice (R_gen = {config.lattice.R_gen:.1f}); increase R_gen")
    return hybrid.decompose(config, R_QM, decomp.R_BUF, R_MM)


def _cached_forces(config, params, u, sites, cache, R_c, workers):
    """Residual forces at sites, reusing any cached rows for this state."""
    sites = np.asarray(sites, dtype=int)
    missing = [int(s) for s in sites if int(s) not in cache]
    if missing:
        rows = residual_forces(config, params, u, missing, R_c, workers)
        cache.update(zip(missing, rows))
    return np.array([cache[int(s)] for s in sites])


def adaptive_estimate(config, params, u, decomp, acfg, R_Omega=None,
                      workers=None, forces_cache=None, verbose=False):
    """Estimator with mesh refinement until the indicators certify it.

    Each pass solves the Poisson lift, then either expands the domain
    (when the truncation indicator dominates) with zero data on the new
    nodes, or keeps the domain; the dominant residual carriers are then
    bisected.  Residual forces are evaluated once, on the initial mesh
    nodes, and carried through refinements by P1 prolongation (exact,
    since every split edge is straight).  Stops when
    rho_total < tau_est * eta_h, flagging the report when the iteration
    budget runs out first.
    """
    if R_Omega is None:
        R_Omega = acfg.R_Omega
    if forces_cache is None:
        forces_cache = {}
    mesh = build_initial_mesh(config, decomp, R_Omega, grade=acfg.grade)
    ns = mesh.node_sites
    live = config.defect.dist(config.sites[ns]) \
        <= support_radius(config, u, acfg.R_c)
    forces = np.zeros((len(ns), 1 if config.dim_m == 1 else 2))
    if live.any():
        forces[live] = _cached_forces(config, params, u, ns[live],
                                      forces_cache, acfg.R_c, workers)
    values = build_residual_field(config, params, mesh, u,
                                  forces=forces).values
    theta = acfg.expansion_factor()
    rows = []
    report = None
    t0_report, t0_values = None, values.copy()
    for k in range(acfg.max_inner):
        report = estimate(mesh, ResidualField(mesh=mesh, values=values))
        if t0_report is None:
            t0_report = report
        rows.append(dict(inner_iter=k, n_nodes=mesh.n_nodes,
                         n_elements=mesh.n_elements, eta_h=report.eta_h,
                         rho_mesh=report.rho_mesh,
                         rho_Omega=report.rho_Omega,
                         rho_total=report.rho_total,
                         R_Omega=report.R_Omega))
        report.inner_iters = k + 1
        report.trace = rows
        report.t0_report, report.t0_values = t0_report, t0_values
        if verbose:
            print(f"    inner {k:2d}: nodes {mesh.n_nodes:6d} "
                  f"eta_h {report.eta_h:.6f} rho_T {report.rho_mesh:.6f} "
                  f"rho_Om {report.rho_Omega:.6f}")
        if report.eta_h == 0.0:
            break                       # zero field: nothing to certify
        if report.rho_total < acfg.tau_est * report.eta_h:
            break
        if k == acfg.max_inner - 1:
            report.converged = False    # budget exhausted before the gate
            break
        if report.rho_mesh <= report.rho_Omega:
            n_old = mesh.n_nodes
            mesh = expand_domain(mesh, config, theta=theta, grade=acfg.grade)
            values = np.vstack([values,
                                np.zeros((mesh.n_nodes - n_old,
                                          values.shape[1]))])
        marked = dorfler_mark(report.rho_T, acfg.tau_D,
                              squared=acfg.dorfler_squared)
        if len(marked) == 0:            # all-zero indicators, cannot refine
            report.converged = False
            break
        prev = mesh
        mesh, _, mids = bisect_refine(mesh, marked)
        values = prolong(values, prev, mesh, mids)
    return report


def run_driver(config, params, coeffs, acfg, workers=None, guard=None,
               verbose=False):
    """Outer adaptive loop: solve, estimate, mark, grow regions, repeat.

    Each iteration equilibrates the hybrid model (warm-started from the
    previous displacement, which is zero on newly freed sites), certifies
    the estimator through adaptive_estimate, and either stops when
    eta_h < eta_tol or grows the QM/MM regions toward the marked error
    carriers.  Returns the full trace; displacement fields are kept per
    iterate so errors against a reference can be attached afterwards.
    """
    decomp = hybrid.decompose(config, acfg.R_QM, acfg.R_BUF, acfg.R_MM)
    u_start = config.u0.copy()
    R_Omega = float(acfg.R_Omega)
    rows = []
    trace = AdaptiveTrace(rows=rows, converged=False)
    for it in range(acfg.max_outer):
        t0 = time.time()
        ok, worst = validate_configuration(
            config, tb.embed_positions(config, u_start))
        if not ok:
            raise RuntimeError(f"warm start violates the minimum-separation "
                               f"bound (worst ratio {worst:.3f})")
        model = hybrid.HybridModel(config, decomp, coeffs, params)
        res = hybrid.minimize(model, u0=u_start, g_tol=acfg.g_tol,
                              guard=guard, free=decomp.free)
        if not res.converged:
            raise RuntimeError(
                f"hybrid minimisation stalled at outer iteration {it}: "
                f"|g|_inf = {res.grad_inf:.3e} after {res.iterations} "
                f"iterations")
        u = res.u
        report = adaptive_estimate(config, params, u, decomp, acfg,
                                   R_Omega=R_Omega, workers=workers,
                                   forces_cache={}, verbose=verbose)
        R_Omega = report.R_Omega
        counts = decomp.counts()
        rows.append(dict(outer_iter=it, R_QM=decomp.R_QM, R_MM=decomp.R_MM,
                         R_Omega=report.R_Omega, N_QM=counts["QM"],
                         N_MM=counts["MM"], eta_h=report.eta_h,
                         rho_h=report.rho_total, eta_a=np.nan,
                         err_ref=np.nan, inner_iters=report.inner_iters,
                         seconds=time.time() - t0))
        trace.displacements.append(u.copy())
        trace.u, trace.decomp, trace.report = u, decomp, report
        if verbose:
            print(f"outer {it}: R_QM {decomp.R_QM:.1f} R_MM {decomp.R_MM:.1f}"
                  f" R_Om {report.R_Omega:.1f} eta_h {report.eta_h:.6f}"
                  f" rho_h {report.rho_total:.6f}"
                  f" inner {report.inner_iters} ({rows[-1]['seconds']:.1f}s)")
        if report.eta_h < acfg.eta_tol:
            trace.converged = True
            break
        # Region marking runs on the initial mesh, restricted to elements
        # that carry residual data, with the squared (energy) convention.
        # Certified meshes equilibrate the element energies, so any Doerfler
        # fraction of them spreads over the whole domain and the
        # max-distance region update below diverges; and the far lift tail,
        # where every clamped site has exactly zero residual, measures
        # domain truncation (handled by the expansion rule), not model
        # error, so elements without data never indicate region growth.
        rep0 = report.t0_report
        mesh = rep0.phi.mesh
        has_data = np.any(report.t0_values != 0.0, axis=1)
        candidates = has_data[mesh.triangles].any(axis=1)
        marked = dorfler_mark(np.where(candidates, rep0.eta_T, 0.0),
                              acfg.tau_D, squared=True)
        if len(marked) == 0:            # eta_h positive needs eta_T mass
            trace.stalled = True
            break
        M_QM, M_MM = classify_marks(config, marked, mesh, decomp)
        decomp = refine_regions(config, M_QM, M_MM, mesh, decomp)
        R_Omega = max(R_Omega, decomp.R_MM + 4.0 * config.lattice.r0)
        if verbose:
            print(f"  mark: {len(marked)} elements -> M_QM {len(M_QM)} "
                  f"M_MM {len(M_MM)}; next R_QM {decomp.R_QM:.2f} "
                  f"R_MM {decomp.R_MM:.2f} R_Om {R_Omega:.1f}")
        u_start = u
    return trace


def attach_reference_errors(trace, config, params, u_ref, R_norm):
    """Fill err_ref rows with energy-type distances to a reference field."""
    from .lattice import canonical_triangulation

    mesh = canonical_triangulation(config, radius=R_norm)
    for row, u in zip(trace.rows, trace.displacements):
        row["err_ref"] = hybrid.error_norm(u, u_ref, mesh)
    return trace


def write_trace(trace, path, provenance=()):
    """Write the outer trace as CSV, one row per iteration."""

    def fmt(row, col):
        val = row[col]
        if col in ("outer_iter", "N_QM", "N_MM", "inner_iters"):
            return str(int(val))
        if isinstance(val, float) and np.isnan(val):
            return ""
        return f"{val:.10g}"

    with open(path, "w") as fh:
        for line in provenance:
            fh.write(f"# {line}\n")
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for row in trace.rows:
            fh.write(",".join(fmt(row, c) for c in TRACE_COLUMNS) + "\n")
    return path
