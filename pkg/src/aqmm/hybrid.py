"""Hybrid QM/MM energy, its gradient, and geometry equilibration.

The reference configuration is split radially around the defect into QM,
buffer, MM, and far-field shells.  The hybrid energy difference couples QM
site energies (computed on the buffered QM cluster) with Taylor MM site
energies over the MM and far-field shells; far-field displacements are
clamped to zero.
"""

import time
import numpy as np
from dataclasses import dataclass, field

from . import tb
from .lattice import validate_configuration, grad_norm
from .mm import MMEvaluator

QM, BUF, MM, FF = 0, 1, 2, 3


@dataclass
class Decomposition:
    """Radial QM/BUF/MM/FF partition of the site set."""

    R_QM: float
    R_BUF: float
    R_MM: float
    labels: np.ndarray
    qm: np.ndarray
    buf: np.ndarray
    mm: np.ndarray
    ff: np.ndarray
    cluster: np.ndarray       # QM u BUF, sorted
    free: np.ndarray          # QM u BUF u MM, sorted

    def counts(self):
        return {"QM": len(self.qm), "BUF": len(self.buf),
                "MM": len(self.mm), "FF": len(self.ff)}


def decompose(config, R_QM, R_BUF, R_MM):
    if not (R_QM < R_QM + R_BUF < R_MM):
        raise ValueError("radii must satisfy R_QM < R_QM + R_BUF < R_MM")
    if config.defect.R_def >= R_QM:
        raise ValueError("QM region must contain the defect core")
    if R_MM >= config.lattice.R_gen:
        raise ValueError("MM region must stay inside the generated lattice")
    d = config.defect.dist(config.sites)
    labels = np.full(config.n_sites, FF, dtype=np.int8)
    labels[d <= R_MM + 1e-9] = MM
    labels[d <= R_QM + R_BUF + 1e-9] = BUF
    labels[d <= R_QM + 1e-9] = QM
    qm = np.where(labels == QM)[0]
    buf = np.where(labels == BUF)[0]
    mm = np.where(labels == MM)[0]
    ff = np.where(labels == FF)[0]
    cluster = np.sort(np.concatenate([qm, buf]))
    free = np.sort(np.concatenate([qm, buf, mm]))
    return Decomposition(R_QM, R_BUF, R_MM, labels, qm, buf, mm, ff,
                         cluster, free)


class AdmissibilityGuard:
    """Cached pair table for the minimum-separation check m/2."""

    def __init__(self, config, m_adm=0.5, radius=None):
        from scipy.spatial import cKDTree

        self.config = config
        self.m_adm = m_adm
        if radius is None:
            radius = 2.5 * config.lattice.r0
        tree = cKDTree(config.sites)
        self.pairs = tree.query_pairs(radius, output_type="ndarray")
        self.ref = np.linalg.norm(config.sites[self.pairs[:, 0]]
                                  - config.sites[self.pairs[:, 1]], axis=1)

    def ok(self, u):
        pos = tb.embed_positions(self.config, u)
        d = np.linalg.norm(pos[self.pairs[:, 0]] - pos[self.pairs[:, 1]],
                           axis=1)
        return bool((d >= self.m_adm * self.ref).all())


class HybridModel:
    """Energy-difference functional of one decomposition.

    energy(u) = sum_{l in QM} (E_l^{QM u BUF}(u) - E_l^{QM u BUF}(0))
              + sum_{l in MM u FF} (V(Du_l(u)) - V(Du_l(0)))
    with one eigensolve of the buffered QM cluster per evaluation and the MM
    sum truncated exactly to sites whose stencil reaches a free site.
    """

    def __init__(self, config, decomp, coeffs, params):
        self.config = config
        self.decomp = decomp
        self.coeffs = coeffs
        self.params = params
        self.dim_m = config.dim_m
        cluster = decomp.cluster
        self.cluster = cluster
        w = np.zeros(len(cluster))
        w[np.isin(cluster, decomp.qm)] = 1.0
        self.qm_weights = w
        # MM sum covers every non-QM site whose stencil reaches a free dof;
        # the buffer belongs to the MM region (its sites enter the QM cluster
        # only as environment, their own energies are MM)
        d = config.defect.dist(config.sites)
        outer = np.where((decomp.labels >= BUF)
                         & (d <= decomp.R_MM + coeffs.R_c + 1e-9))[0]
        self.mm_eval = MMEvaluator(config, coeffs, outer)
        self._zero = np.zeros((config.n_sites, self.dim_m))
        sd0, _, _ = tb.cluster_spectral(config, cluster, self._zero, params)
        self.qm_ref = float(((sd0.psi ** 2) @ sd0.weights) @ self.qm_weights)
        self.mm_eval.energy_difference(self._zero)  # prime reference energies
        self.n_eval = 0

    def _comps(self):
        return slice(2, 3) if self.dim_m == 1 else slice(0, 2)

    def energy_and_gradient(self, u):
        """Hybrid energy difference and its gradient on all sites."""
        sd, pd, pos = tb.cluster_spectral(self.config, self.cluster, u,
                                          self.params)
        e_qm = float(((sd.psi ** 2) @ sd.weights) @ self.qm_weights) \
            - self.qm_ref
        g_cl, _, _ = tb.weighted_trace_gradient(
            pos, self.params, self.qm_weights, sd=sd, pair_data=pd)
        grad = np.zeros((self.config.n_sites, self.dim_m))
        grad[self.cluster] = g_cl[:, self._comps()]
        e_mm = self.mm_eval.energy_difference(u)
        self.mm_eval.gradient(u, out=grad)
        self.n_eval += 1
        return e_qm + e_mm, grad

    def energy(self, u):
        return self.energy_and_gradient(u)[0]


@dataclass
class MinimizeResult:
    u: np.ndarray
    iterations: int
    converged: bool
    energy: float
    grad_inf: float
    log: list = field(default_factory=list)


def minimize(model, u0=None, g_tol=1e-6, max_iter=400, memory=20,
             guard=None, free=None, step_max=None, verbose=False):
    """Equilibrate the free sites by limited-memory quasi-Newton descent.

    Backtracking line search enforces sufficient decrease and rejects steps
    violating the minimum-separation guard; the energy trace is monotone over
    accepted steps.  ``step_max`` caps the per-iteration displacement of any
    single degree of freedom, which keeps the monotone descent inside the
    starting basin (the band energy is unbounded below under pair collapse,
    so an uncapped quasi-Newton trial step can tunnel out).  Returns the
    displacement with clamped sites untouched.
    """
    config = model.config
    m = model.dim_m
    if free is None:
        free = model.decomp.free
    if step_max is None:
        step_max = 0.1 * config.lattice.r0
    dofs = (free[:, None] * m + np.arange(m)).reshape(-1)
    u = np.zeros((config.n_sites, m)) if u0 is None else np.array(u0, float)
    if guard is None:
        guard = AdmissibilityGuard(config)
    if not guard.ok(u):
        raise ValueError("initial state violates minimum separation")

    def eval_at(x):
        v = u.copy()
        v.reshape(-1)[dofs] = x
        e, g = model.energy_and_gradient(v)
        return e, g.reshape(-1)[dofs], v

    x = u.reshape(-1)[dofs].copy()
    E, g, _ = eval_at(x)
    s_hist, y_hist, rho_hist = [], [], []
    log = [(0, E, float(np.abs(g).max() if len(g) else 0.0), 0.0)]
    converged = float(np.abs(g).max() if len(g) else 0.0) <= g_tol
    it = 0
    while not converged and it < max_iter:
        it += 1
        q = g.copy()
        alphas = []
        for s, y, r in zip(reversed(s_hist), reversed(y_hist),
                           reversed(rho_hist)):
            a = r * (s @ q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            y = y_hist[-1]
            q *= (s_hist[-1] @ y) / (y @ y)
        for (s, y, r), a in zip(zip(s_hist, y_hist, rho_hist),
                                reversed(alphas)):
            b = r * (y @ q)
            q += (a - b) * s
        d = -q
        slope = float(d @ g)
        if slope >= 0.0:
            d = -g
            slope = float(d @ g)
        step = min(1.0, step_max / max(float(np.abs(d).max()), 1e-300))
        accepted = False
        for _ in range(40):
            x_try = x + step * d
            e_try, g_try, v_try = eval_at(x_try)
            if np.isfinite(e_try) and e_try <= E + 1e-4 * step * slope \
                    and guard.ok(v_try):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        s_vec = x_try - x
        y_vec = g_try - g
        sy = float(s_vec @ y_vec)
        if sy > 1e-14:
            s_hist.append(s_vec)
            y_hist.append(y_vec)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x, E, g = x_try, e_try, g_try
        ginf = float(np.abs(g).max())
        log.append((it, E, ginf, step))
        if verbose:
            print(f"  it {it:3d}  E {E: .8e}  |g|_inf {ginf:.3e}  "
                  f"step {step:.3f}")
        converged = ginf <= g_tol
    u_out = u.copy()
    u_out.reshape(-1)[dofs] = x
    return MinimizeResult(u_out, it, converged, E,
                          float(np.abs(g).max() if len(g) else 0.0), log)


class ClampedQMModel:
    """Pure-QM energy on a large clamped ball, for reference solutions."""

    def __init__(self, config, params, R_domain, pad=None):
        self.config = config
        self.params = params
        self.dim_m = config.dim_m
        if pad is None:
            pad = params.R_cut + 0.1
        d = config.defect.dist(config.sites)
        self.free_sites = np.where(d <= R_domain + 1e-9)[0]
        self.cluster = np.where(d <= R_domain + pad + 1e-9)[0]
        w = np.zeros(len(self.cluster))
        w[np.isin(self.cluster, self.free_sites)] = 1.0
        self.weights = w
        zero = np.zeros((config.n_sites, self.dim_m))
        sd0, _, _ = tb.cluster_spectral(config, self.cluster, zero, params)
        self.ref = float(((sd0.psi ** 2) @ sd0.weights) @ w)
        self.decomp = None

    def _comps(self):
        return slice(2, 3) if self.dim_m == 1 else slice(0, 2)

    def energy_and_gradient(self, u):
        sd, pd, pos = tb.cluster_spectral(self.config, self.cluster, u,
                                          self.params)
        e = float(((sd.psi ** 2) @ sd.weights) @ self.weights) - self.ref
        g_cl, _, _ = tb.weighted_trace_gradient(pos, self.params, self.weights,
                                                sd=sd, pair_data=pd)
        grad = np.zeros((self.config.n_sites, self.dim_m))
        grad[self.cluster] = g_cl[:, self._comps()]
        return e, grad

    def energy(self, u):
        return self.energy_and_gradient(u)[0]


def reference_solve(config, params, R_domain, g_tol=1e-6, max_iter=600,
                    u_start=None, verbose=False):
    """Equilibrium of the pure-QM model with clamping outside R_domain."""
    model = ClampedQMModel(config, params, R_domain)
    res = minimize(model, u0=u_start, g_tol=g_tol, max_iter=max_iter,
                   free=model.free_sites, verbose=verbose)
    return res


def error_norm(u, u_ref, mesh):
    """Energy-type distance between two displacement fields on one mesh."""
    diff = np.asarray(u, dtype=float) - np.asarray(u_ref, dtype=float)
    node_sites = getattr(mesh, "node_sites", None)
    if node_sites is not None:
        diff = diff[node_sites]
    return grad_norm(mesh, diff)
