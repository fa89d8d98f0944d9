"""Two-centre tight-binding model with finite-temperature site energies.

A single orbital per atom, Morse-shaped hopping tapered smoothly to zero at
a finite cutoff, zero on-site terms.  Site energies distribute the band
energy over atoms through eigenvector weights; their derivatives come from
divided differences of the occupied-energy function applied to the spectrum.
"""

import numpy as np
from dataclasses import dataclass
from scipy.linalg import eigh
from scipy.spatial import cKDTree
from scipy.special import expit

DEGENERACY_TOL = 1e-12


@dataclass
class TBParams:
    alpha: float = 2.0
    beta: float = 10.0
    mu: float = 0.0
    R_cut: float = 3.0
    taper_width: float = 1.0


def hopping(r, params):
    """Morse hopping, unit depth at unit distance, tapered to zero at R_cut."""
    r = np.asarray(r, dtype=float)
    a = params.alpha
    m = np.exp(-2.0 * a * (r - 1.0)) - 2.0 * np.exp(-a * (r - 1.0))
    r1 = params.R_cut - params.taper_width
    s = np.clip((r - r1) / params.taper_width, 0.0, 1.0)
    t = 1.0 - s ** 3 * (10.0 - 15.0 * s + 6.0 * s ** 2)
    return m * t


def hopping_d(r, params):
    """Derivative of the tapered hopping."""
    r = np.asarray(r, dtype=float)
    a = params.alpha
    e2 = np.exp(-2.0 * a * (r - 1.0))
    e1 = np.exp(-a * (r - 1.0))
    m = e2 - 2.0 * e1
    md = -2.0 * a * e2 + 2.0 * a * e1
    w = params.taper_width
    r1 = params.R_cut - w
    s = np.clip((r - r1) / w, 0.0, 1.0)
    t = 1.0 - s ** 3 * (10.0 - 15.0 * s + 6.0 * s ** 2)
    td = -30.0 * s ** 2 * (1.0 - s) ** 2 / w
    return md * t + m * td


def occupation(eps, params):
    """Fermi-Dirac occupation, overflow safe."""
    return expit(-params.beta * (np.asarray(eps, dtype=float) - params.mu))


def occupied_energy(eps, params):
    """g(eps) = f(eps) * eps, the per-state contribution to the band energy."""
    return occupation(eps, params) * eps


def occupied_energy_d(eps, params):
    f = occupation(eps, params)
    fd = -params.beta * f * (1.0 - f)
    return f + eps * fd


def neighbor_pairs(positions, params, shift_fn=None, index_map=None):
    """Interacting pairs (i < j), difference vectors and distances.

    positions: (n, 2) deformed planar coordinates, or (n, 3) for anti-plane
    models where the first two columns stay at the reference and the third
    carries the out-of-plane displacement.  shift_fn(gi, gj) adds a constant
    to the out-of-plane difference (branch-jump correction of multivalued
    predictors); index_map translates local to global indices for it.
    """
    positions = np.asarray(positions, dtype=float)
    tree = cKDTree(positions[:, :2])
    pairs = tree.query_pairs(params.R_cut, output_type="ndarray")
    if len(pairs) == 0:
        pairs = np.zeros((0, 2), dtype=int)
    dvec = positions[pairs[:, 0]] - positions[pairs[:, 1]]
    if shift_fn is not None and positions.shape[1] == 3 and len(pairs):
        gi = pairs[:, 0] if index_map is None else index_map[pairs[:, 0]]
        gj = pairs[:, 1] if index_map is None else index_map[pairs[:, 1]]
        dvec[:, 2] += shift_fn(gi, gj)
    r = np.linalg.norm(dvec, axis=1)
    return pairs, dvec, r


def assemble_hamiltonian(positions, params, shift_fn=None, index_map=None,
                         pair_data=None):
    """Dense symmetric Hamiltonian from tapered pairwise hopping."""
    n = len(positions)
    if pair_data is None:
        pair_data = neighbor_pairs(positions, params, shift_fn, index_map)
    pairs, _, r = pair_data
    H = np.zeros((n, n))
    if len(pairs):
        h = hopping(r, params)
        H[pairs[:, 0], pairs[:, 1]] = h
        H[pairs[:, 1], pairs[:, 0]] = h
    return H, pair_data


@dataclass
class SpectralData:
    eps: np.ndarray
    psi: np.ndarray
    occ: np.ndarray
    weights: np.ndarray  # f(eps) * eps


def spectral_decompose(H, params):
    eps, psi = eigh(H)
    return SpectralData(eps, psi, occupation(eps, params),
                        occupied_energy(eps, params))


def band_energy(sd):
    return float(sd.weights.sum())


def site_energies(sd):
    """Distribute the band energy over atoms; sums to band_energy exactly."""
    return (sd.psi ** 2) @ sd.weights


def _divided_differences(eps, params):
    g = occupied_energy(eps, params)
    de = eps[:, None] - eps[None, :]
    close = np.abs(de) < DEGENERACY_TOL
    num = g[:, None] - g[None, :]
    gamma = np.where(close, occupied_energy_d(0.5 * (eps[:, None] + eps[None, :]),
                                              params),
                     num / np.where(close, 1.0, de))
    return gamma


def weighted_trace_gradient(positions, params, weights, shift_fn=None,
                            index_map=None, sd=None, pair_data=None):
    """Gradient of sum_l weights_l E_l with respect to atom coordinates.

    Uses the Daleckii-Krein derivative of g(H) = f(H) H: with H = U diag(eps) U',
    d tr[P g(H)] = M : dH where M = U (Gamma o U' P U) U' and Gamma holds the
    divided differences of g.  Returns an (n_atoms, dim) array.
    """
    positions = np.asarray(positions, dtype=float)
    H, pair_data = assemble_hamiltonian(positions, params, shift_fn, index_map,
                                        pair_data)
    if sd is None:
        sd = spectral_decompose(H, params)
    U = sd.psi
    W = (U.T * np.asarray(weights, dtype=float)) @ U
    gamma = _divided_differences(sd.eps, params)
    M = U @ (gamma * W) @ U.T
    pairs, dvec, r = pair_data
    grad = np.zeros_like(positions)
    if len(pairs):
        coef = 2.0 * M[pairs[:, 0], pairs[:, 1]] * hopping_d(r, params) / r
        contrib = coef[:, None] * dvec
        np.add.at(grad, pairs[:, 0], contrib)
        np.add.at(grad, pairs[:, 1], -contrib)
    return grad, sd, pair_data


def make_shift_fn(config):
    """Branch-jump correction for out-of-plane bond differences, or None."""
    from .lattice import branch_crossing

    d = config.defect
    if d.kind != "screw":
        return None

    def shift(gi, gj):
        # difference convention pos[i] - pos[j]: corrected difference along
        # j -> i is w_i - w_j + b * chi(j -> i)
        return d.burgers * branch_crossing(d, config.sites[gj],
                                           config.sites[gi])

    return shift


def embed_positions(config, u):
    """Deformed atom coordinates from a displacement field.

    In-plane models return sites + u; anti-plane models return 3D positions
    with the predictor plus corrector in the third column.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    if config.dim_m == 2:
        return config.sites + u
    w = config.u0 + u
    return np.hstack([config.sites, w])


def cluster_indices(config, center, R):
    """Site indices within distance R of a site (int) or a point (array)."""
    if not hasattr(config, "_site_tree"):
        config._site_tree = cKDTree(config.sites)
    x = config.sites[center] if np.isscalar(center) else np.asarray(center)
    idx = config._site_tree.query_ball_point(x, R + 1e-9)
    return np.sort(np.asarray(idx, dtype=int))


def cluster_spectral(config, cluster, u, params):
    """Spectral data of the Hamiltonian restricted to a site cluster."""
    pos = embed_positions(config, u)[cluster]
    shift = make_shift_fn(config)
    H, pd = assemble_hamiltonian(pos, params, shift, index_map=cluster)
    return spectral_decompose(H, params), pd, pos


def cluster_site_energy(config, center, R, u, params):
    """Site energy of a centre atom computed on its finite ball cluster."""
    cluster = cluster_indices(config, center, R)
    sd, _, _ = cluster_spectral(config, cluster, u, params)
    local = int(np.searchsorted(cluster, center))
    return float((sd.psi[local] ** 2) @ sd.weights)


def fermi_level(params, generator=None, n_ring=15, filling=0.5):
    """Chemical potential of a homogeneous hexagonal cluster at given filling.

    The cluster of hexagonal radius 15 has 721 atoms; mu sits midway between
    the two eigenvalues straddling the requested electron count.
    """
    from .lattice import TRI_GENERATOR, hex_ring, lattice_ball

    A = TRI_GENERATOR if generator is None else np.asarray(generator)
    spacing = min(np.linalg.norm(A[:, 0]), np.linalg.norm(A[:, 1]))
    coords = lattice_ball(A, (n_ring + 0.5) * spacing)
    coords = coords[hex_ring(coords) <= n_ring]
    pos = coords @ A.T
    H, _ = assemble_hamiltonian(pos, params)
    eps = eigh(H, eigvals_only=True)
    m = int(round(filling * len(eps)))
    return float(0.5 * (eps[m - 1] + eps[m]))
