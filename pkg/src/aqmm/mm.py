"""Taylor-expanded molecular-mechanics surrogate of the truncated site energy.

The site energy of one interior homogeneous atom, truncated to its ball of
radius R_c, is expanded to order k in the displacement differences over the
stencil.  One coefficient set serves every far-field site by translation
invariance; stencil entries pointing at removed or absent sites are treated
as co-moving ghosts (zero difference).
"""

import hashlib
import os
import numpy as np
from dataclasses import dataclass, field

from . import tb
from .lattice import lattice_ball, predictor_differences

FD_STEP_2 = 1e-4
FD_STEP_3 = 1e-3
T3_THRESHOLD = 1e-8


@dataclass
class TaylorCoefficients:
    """Polynomial coefficients of the truncated site energy in Du."""

    offsets: np.ndarray          # (S, 2) integer stencil offsets
    dim_m: int
    order: int
    R_c: float
    V0: float
    G: np.ndarray                # (S * dim_m,)
    H: np.ndarray                # (S * dim_m, S * dim_m)
    T3: np.ndarray | None = None  # (D3, D3, D3) over the inner stencil, or None
    inner: np.ndarray | None = None  # indices into the stencil for T3 rows
    key: str = ""

    @property
    def n_dof(self):
        return len(self.offsets) * self.dim_m


def coefficients_key(params, R_c, k, generator, dim_m):
    payload = np.array([params.alpha, params.beta, params.mu, params.R_cut,
                        params.taper_width, R_c, k, dim_m], dtype=float)
    h = hashlib.sha256()
    h.update(payload.tobytes())
    h.update(np.asarray(generator, dtype=float).tobytes())
    return h.hexdigest()[:16]


def coefficients_cache_path(params, R_c, k, generator, dim_m,
                            cache_dir=None):
    """Path of the on-disk coefficient archive for this parameter set."""
    key = coefficients_key(params, R_c, k, np.asarray(generator, float),
                           dim_m)
    if cache_dir is None:
        cache_dir = os.environ.get("AQMM_CACHE",
                                   os.path.expanduser("~/.cache/aqmm"))
    return os.path.join(cache_dir, f"taylor_{key}.npz")


def _homogeneous_cluster(generator, R_c, dim_m):
    coords = lattice_ball(generator, R_c)
    pos = coords @ np.asarray(generator).T
    center = int(np.where(np.all(coords == 0, axis=1))[0][0])
    if dim_m == 1:
        pos = np.hstack([pos, np.zeros((len(pos), 1))])
    return coords, pos, center


def _center_site_gradient(pos, center, params, comps):
    w = np.zeros(len(pos))
    w[center] = 1.0
    g, _, _ = tb.weighted_trace_gradient(pos, params, w)
    return g[:, comps]


def compute_taylor_coefficients(params, R_c, k, generator, dim_m=2,
                                R_taylor3=None, cache_dir=None, verbose=False):
    """Build (or load from cache) the order-k expansion coefficients.

    First variation is analytic; the second comes from central differences of
    it (step 1e-4); third-order entries (k = 3) from mixed central differences
    (step 1e-3) restricted to the inner stencil of radius R_taylor3, dropped
    below a magnitude threshold.
    """
    generator = np.asarray(generator, dtype=float)
    key = coefficients_key(params, R_c, k, generator, dim_m)
    cache_path = coefficients_cache_path(params, R_c, k, generator, dim_m,
                                         cache_dir)
    if os.path.exists(cache_path):
        return load_coefficients(cache_path)
    cache_dir = os.path.dirname(cache_path)

    coords, pos0, center = _homogeneous_cluster(generator, R_c, dim_m)
    stencil = np.delete(np.arange(len(coords)), center)
    offsets = coords[stencil]
    S = len(offsets)
    comps = [2] if dim_m == 1 else [0, 1]

    H0, _ = tb.assemble_hamiltonian(pos0, params)
    sd0 = tb.spectral_decompose(H0, params)
    V0 = float((sd0.psi[center] ** 2) @ sd0.weights)
    G_full = _center_site_gradient(pos0, center, params, comps)
    G = G_full[stencil].reshape(-1)

    def probe_gradient(displacements):
        # displacements: list of (stencil_local_index, comp, amount)
        q = pos0.copy()
        for s, c, a in displacements:
            q[stencil[s], comps[c]] += a
        return _center_site_gradient(q, center, params, comps)[stencil].reshape(-1)

    n_dof = S * dim_m
    H = np.zeros((n_dof, n_dof))
    h = FD_STEP_2
    for s in range(S):
        for c in range(dim_m):
            gp = probe_gradient([(s, c, +h)])
            gm = probe_gradient([(s, c, -h)])
            H[:, s * dim_m + c] = (gp - gm) / (2.0 * h)
        if verbose and s % 50 == 0:
            print(f"  hessian probe {s}/{S}")
    H = 0.5 * (H + H.T)

    T3 = None
    inner = None
    if k >= 3:
        if R_taylor3 is None:
            r0 = min(np.linalg.norm(generator[:, 0]),
                     np.linalg.norm(generator[:, 1]))
            R_taylor3 = 3.0 * r0
        lens = np.linalg.norm(offsets @ generator.T, axis=1)
        inner = np.where(lens <= R_taylor3 + 1e-9)[0]
        di = []
        for s in inner:
            for c in range(dim_m):
                di.append((s, c))
        D3 = len(di)
        T3 = np.zeros((D3, D3, D3))
        h3 = FD_STEP_3
        row_sel = np.array([s * dim_m + c for s, c in di])
        for a in range(D3):
            sa, ca = di[a]
            for b in range(a, D3):
                sb, cb = di[b]
                gpp = probe_gradient([(sa, ca, +h3), (sb, cb, +h3)])
                gpm = probe_gradient([(sa, ca, +h3), (sb, cb, -h3)])
                gmp = probe_gradient([(sa, ca, -h3), (sb, cb, +h3)])
                gmm = probe_gradient([(sa, ca, -h3), (sb, cb, -h3)])
                mixed = (gpp - gpm - gmp + gmm) / (4.0 * h3 * h3)
                T3[:, a, b] = mixed[row_sel]
                T3[:, b, a] = T3[:, a, b]
            if verbose:
                print(f"  third-order probe {a}/{D3}")
        # supersymmetrize and threshold
        T3 = (T3 + T3.transpose(1, 2, 0) + T3.transpose(2, 0, 1)
              + T3.transpose(0, 2, 1) + T3.transpose(1, 0, 2)
              + T3.transpose(2, 1, 0)) / 6.0
        T3[np.abs(T3) < T3_THRESHOLD] = 0.0
        if not np.any(T3):
            T3 = None

    coeffs = TaylorCoefficients(offsets=offsets, dim_m=dim_m, order=k, R_c=R_c,
                                V0=V0, G=G, H=H, T3=T3, inner=inner, key=key)
    try:
        os.makedirs(cache_dir, exist_ok=True)
        save_coefficients(cache_path, coeffs)
    except OSError:
        pass
    return coeffs


def save_coefficients(path, coeffs):
    data = dict(offsets=coeffs.offsets, dim_m=coeffs.dim_m, order=coeffs.order,
                R_c=coeffs.R_c, V0=coeffs.V0, G=coeffs.G, H=coeffs.H,
                key=coeffs.key)
    if coeffs.T3 is not None:
        data["T3"] = coeffs.T3
        data["inner"] = coeffs.inner
    elif coeffs.inner is not None:
        data["inner"] = coeffs.inner
    np.savez_compressed(path, **data)


def load_coefficients(path):
    z = np.load(path)
    return TaylorCoefficients(
        offsets=z["offsets"], dim_m=int(z["dim_m"]), order=int(z["order"]),
        R_c=float(z["R_c"]), V0=float(z["V0"]), G=z["G"], H=z["H"],
        T3=z["T3"] if "T3" in z else None,
        inner=z["inner"] if "inner" in z else None, key=str(z["key"]))


def _cubic_terms(coeffs, DU):
    """(energy, gradient) contributions of the third-order tensor, or zeros."""
    n = len(DU)
    if coeffs.T3 is None:
        return np.zeros(n), None
    dim_m = coeffs.dim_m
    cols = (coeffs.inner[:, None] * dim_m + np.arange(dim_m)).reshape(-1)
    Din = DU[:, cols]
    A1 = np.tensordot(Din, coeffs.T3, axes=([1], [0]))   # (n, D3, D3)
    A2 = np.einsum("nij,nj->ni", A1, Din)                # (n, D3)
    e3 = np.einsum("ni,ni->n", A2, Din) / 6.0
    g3 = np.zeros_like(DU)
    g3[:, cols] = 0.5 * A2
    return e3, g3


def mm_site_energy(coeffs, DU):
    """Site energies for stacked stencil difference vectors (n, S*dim_m)."""
    DU = np.atleast_2d(DU)
    e = coeffs.V0 + DU @ coeffs.G + 0.5 * np.einsum("ni,ni->n", DU,
                                                    DU @ coeffs.H)
    e3, _ = _cubic_terms(coeffs, DU)
    return e + e3


def mm_site_gradient(coeffs, DU):
    """d(site energy)/d(Du) for stacked difference vectors (n, S*dim_m)."""
    DU = np.atleast_2d(DU)
    g = coeffs.G[None, :] + DU @ coeffs.H
    _, g3 = _cubic_terms(coeffs, DU)
    if g3 is not None:
        g = g + g3
    return g


class MMEvaluator:
    """Vectorized MM sums over a fixed set of sites of one configuration.

    Precomputes the stencil gather table and branch-corrected predictor
    differences.  Missing stencil neighbours (removed sites, sites beyond the
    generated region) contribute zero difference.
    """

    def __init__(self, config, coeffs, site_indices):
        self.config = config
        self.coeffs = coeffs
        self.sites = np.asarray(site_indices, dtype=int)
        table = config.neighbor_table(coeffs.offsets)[self.sites]
        self.mask = table >= 0
        self.table = np.where(self.mask, table, 0)
        n, S = self.table.shape
        m = coeffs.dim_m
        self.du0 = np.zeros((n, S, m))
        if config.defect.kind == "screw":
            src = np.repeat(self.sites, S)
            dst = self.table.reshape(-1)
            d0 = predictor_differences(config, src, dst).reshape(n, S, m)
            self.du0 = np.where(self.mask[:, :, None], d0, 0.0)
        self.ref_energies = None

    def differences(self, u):
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            u = u[:, None]
        du = u[self.table] - u[self.sites][:, None, :]
        du = np.where(self.mask[:, :, None], du, 0.0) + self.du0
        return du.reshape(len(self.sites), -1)

    def energies(self, u):
        return mm_site_energy(self.coeffs, self.differences(u))

    def energy_difference(self, u):
        """sum_l ( V(Du_l(u)) - V(Du_l(0)) ) over the evaluator's sites."""
        if self.ref_energies is None:
            self.ref_energies = self.energies(np.zeros((self.config.n_sites,
                                                        self.coeffs.dim_m)))
        return float((self.energies(u) - self.ref_energies).sum())

    def gradient(self, u, out=None):
        """Accumulate d(sum_l V_l)/du into an (n_sites, dim_m) array."""
        g_du = mm_site_gradient(self.coeffs, self.differences(u))
        n, S = self.table.shape
        m = self.coeffs.dim_m
        g_du = g_du.reshape(n, S, m) * self.mask[:, :, None]
        if out is None:
            out = np.zeros((self.config.n_sites, m))
        np.add.at(out, self.table.reshape(-1), g_du.reshape(-1, m))
        np.add.at(out, self.sites, -g_du.sum(axis=1))
        return out
