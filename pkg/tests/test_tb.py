"""Tight-binding Hamiltonian, spectral quantities, and analytic gradients."""

import numpy as np
import pytest

from aqmm import tb
from aqmm.lattice import DefectSpec, LatticeSpec, TRI_GENERATOR, build_lattice
from aqmm.tb import (
    TBParams, assemble_hamiltonian, band_energy, cluster_indices,
    cluster_site_energy, cluster_spectral, embed_positions, fermi_level,
    hopping, hopping_d, make_shift_fn, neighbor_pairs, occupation,
    occupied_energy, occupied_energy_d, site_energies, spectral_decompose,
    weighted_trace_gradient,
)

PARAMS = TBParams(mu=1.1591102852190827)


def central_diff(f, x, h=1e-5):
    out = np.zeros_like(x)
    flat = out.reshape(-1)
    xf = x.reshape(-1)
    for k in range(len(xf)):
        xp = xf.copy(); xp[k] += h
        xm = xf.copy(); xm[k] -= h
        flat[k] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return out


class TestHoppingFunction:
    def test_unit_depth_at_unit_distance(self):
        assert abs(hopping(1.0, PARAMS) - (-1.0)) < 1e-15

    def test_zero_beyond_cutoff(self):
        r = np.array([3.0, 3.5, 10.0])
        assert np.all(hopping(r, PARAMS) == 0.0)
        assert np.all(hopping_d(r, PARAMS) == 0.0)

    def test_taper_continuity(self):
        r1 = PARAMS.R_cut - PARAMS.taper_width
        eps = 1e-9
        assert abs(hopping(r1 - eps, PARAMS) - hopping(r1 + eps, PARAMS)) < 1e-7
        assert abs(hopping(PARAMS.R_cut - eps, PARAMS)) < 1e-7

    def test_derivative_matches_fd(self):
        rng = np.random.default_rng(0)
        r = rng.uniform(0.7, 3.2, size=200)
        h = 1e-6
        fd = (hopping(r + h, PARAMS) - hopping(r - h, PARAMS)) / (2 * h)
        assert np.allclose(hopping_d(r, PARAMS), fd, atol=1e-7)


class TestOccupation:
    def test_half_filling_at_mu(self):
        assert abs(occupation(PARAMS.mu, PARAMS) - 0.5) < 1e-15

    def test_monotone_and_overflow_safe(self):
        eps = np.array([-1e4, -1.0, 0.0, 2.0, 1e4])
        f = occupation(eps, PARAMS)
        assert np.all(np.diff(f) <= 0)
        assert np.all(np.isfinite(f))
        assert f[0] == 1.0 and f[-1] == 0.0

    def test_energy_derivative_matches_fd(self):
        eps = np.linspace(PARAMS.mu - 1.5, PARAMS.mu + 1.5, 101)
        h = 1e-6
        fd = (occupied_energy(eps + h, PARAMS)
              - occupied_energy(eps - h, PARAMS)) / (2 * h)
        assert np.allclose(occupied_energy_d(eps, PARAMS), fd, atol=1e-6)


class TestHamiltonian:
    def test_symmetric_zero_diagonal(self):
        rng = np.random.default_rng(1)
        pos = rng.uniform(-3, 3, size=(12, 2))
        H, _ = assemble_hamiltonian(pos, PARAMS)
        assert np.array_equal(H, H.T)
        assert np.all(np.diag(H) == 0.0)

    def test_equilateral_triangle_spectrum(self):
        # three equally coupled orbitals: eigenvalues {2h, -h, -h}
        pos = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
        H, _ = assemble_hamiltonian(pos, PARAMS)
        h = hopping(1.0, PARAMS)
        eps = np.linalg.eigvalsh(H)
        want = np.sort(np.array([2 * h, -h, -h]))
        assert np.max(np.abs(eps - want)) < 1e-12

    def test_pair_distance_convention(self):
        pos = np.array([[0.0, 0.0], [1.3, 0.0]])
        pairs, dvec, r = neighbor_pairs(pos, PARAMS)
        assert len(pairs) == 1
        assert abs(r[0] - 1.3) < 1e-15
        assert np.allclose(dvec[0], pos[pairs[0, 0]] - pos[pairs[0, 1]])

    def test_site_energies_sum_to_band_energy(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            n = rng.integers(5, 60)
            pos = 1.05 * rng.uniform(-4, 4, size=(n, 2))
            H, _ = assemble_hamiltonian(pos, PARAMS)
            sd = spectral_decompose(H, PARAMS)
            assert abs(site_energies(sd).sum() - band_energy(sd)) \
                < 1e-12 * max(n, 1)


class TestGradients:
    def fd_energy(self, weights, params):
        def f(pos):
            H, _ = assemble_hamiltonian(pos, params)
            sd = spectral_decompose(H, params)
            return float(site_energies(sd) @ weights)
        return f

    def test_matches_fd_random_clusters(self):
        rng = np.random.default_rng(4)
        lat = build_lattice(LatticeSpec(R_gen=3.0), DefectSpec.none())
        for _ in range(3):
            pos = lat.sites + 0.03 * rng.normal(size=lat.sites.shape)
            w = rng.uniform(0.0, 1.0, size=len(pos))
            grad, _, _ = weighted_trace_gradient(pos, PARAMS, w)
            fd = central_diff(self.fd_energy(w, PARAMS), pos)
            denom = max(np.abs(fd).max(), 1e-12)
            assert np.abs(grad - fd).max() / denom < 1e-6

    def test_degenerate_spectrum(self):
        # equilateral triangle has a double eigenvalue; the divided-difference
        # path must stay finite and match finite differences
        pos = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
        w = np.array([0.2, 0.5, 0.3])
        grad, _, _ = weighted_trace_gradient(pos, PARAMS, w)
        assert np.all(np.isfinite(grad))
        fd = central_diff(self.fd_energy(w, PARAMS), pos)
        assert np.abs(grad - fd).max() < 1e-6

    def test_uniform_weights_give_band_gradient(self):
        # with unit weights the weighted trace is the band energy
        rng = np.random.default_rng(5)
        pos = rng.uniform(-2, 2, size=(8, 2))
        pos *= 1.2
        grad, _, _ = weighted_trace_gradient(pos, PARAMS, np.ones(8))

        def band(p):
            H, _ = assemble_hamiltonian(p, PARAMS)
            return band_energy(spectral_decompose(H, PARAMS))

        fd = central_diff(band, pos)
        assert np.abs(grad - fd).max() < 1e-6 * max(np.abs(fd).max(), 1.0)


class TestEmbeddingAndClusters:
    def test_embed_in_plane(self):
        cfg = build_lattice(LatticeSpec(R_gen=3.0), DefectSpec.vacancy())
        u = np.full((cfg.n_sites, 2), 0.1)
        pos = embed_positions(cfg, u)
        assert np.allclose(pos, cfg.sites + 0.1)

    def test_embed_anti_plane(self):
        cfg = build_lattice(LatticeSpec(R_gen=3.0), DefectSpec.screw())
        u = np.full((cfg.n_sites, 1), 0.25)
        pos = embed_positions(cfg, u)
        assert pos.shape == (cfg.n_sites, 3)
        assert np.allclose(pos[:, :2], cfg.sites)
        assert np.allclose(pos[:, 2:], cfg.u0 + 0.25)

    def test_cluster_indices_sorted_within_radius(self):
        cfg = build_lattice(LatticeSpec(R_gen=6.0), DefectSpec.vacancy())
        center = cfg.lookup(np.array([[1, 0]]))[0]
        cl = cluster_indices(cfg, center, 2.0)
        assert np.all(np.diff(cl) > 0)
        d = np.linalg.norm(cfg.sites[cl] - cfg.sites[center], axis=1)
        assert d.max() <= 2.0 + 1e-8
        assert center in cl

    def test_screw_shift_on_cut_bonds(self):
        cfg = build_lattice(LatticeSpec(R_gen=4.0), DefectSpec.screw())
        shift = make_shift_fn(cfg)
        i = cfg.lookup(np.array([[2, 0]]))[0]   # just below the cut
        j = cfg.lookup(np.array([[2, 1]]))[0]   # just above
        s = shift(np.array([j]), np.array([i]))
        assert abs(abs(s[0]) - cfg.defect.burgers) < 1e-12
        # same bond far to the left of the branch point: no jump
        i2 = cfg.lookup(np.array([[-3, 0]]))[0]
        j2 = cfg.lookup(np.array([[-3, 1]]))[0]
        assert make_shift_fn(cfg)(np.array([j2]), np.array([i2]))[0] == 0.0

    def test_shift_fn_none_for_point_defects(self):
        cfg = build_lattice(LatticeSpec(R_gen=3.0), DefectSpec.vacancy())
        assert make_shift_fn(cfg) is None

    def test_cluster_site_energy_locality(self):
        # enlarging the cluster changes the site energy less and less
        cfg = build_lattice(LatticeSpec(R_gen=12.0), DefectSpec.vacancy())
        center = cfg.lookup(np.array([[1, 0]]))[0]
        u = np.zeros((cfg.n_sites, 2))
        vals = [cluster_site_energy(cfg, center, R, u, PARAMS)
                for R in (3.0, 5.0, 7.0, 9.0)]
        gaps = np.abs(np.diff(vals))
        assert gaps[-1] < gaps[0]
        assert gaps[-1] < 2e-2


class TestFermiLevel:
    def test_point_lattice_level(self):
        mu = fermi_level(TBParams(), filling=0.4)
        assert abs(mu - 1.1591102852190827) < 1e-12

    def test_stretched_lattice_level(self):
        mu = fermi_level(TBParams(), generator=1.15 * TRI_GENERATOR,
                         filling=0.5)
        assert abs(mu - 1.183008046105479) < 1e-12

    def test_level_is_straddling_midpoint(self):
        params = TBParams()
        mu = fermi_level(params, n_ring=6, filling=0.4)
        from aqmm.lattice import hex_ring, lattice_ball

        coords = lattice_ball(TRI_GENERATOR, 6.5)
        coords = coords[hex_ring(coords) <= 6]
        H, _ = assemble_hamiltonian(coords @ TRI_GENERATOR.T, params)
        eps = np.linalg.eigvalsh(H)
        m = int(round(0.4 * len(eps)))
        assert abs(mu - 0.5 * (eps[m - 1] + eps[m])) < 1e-12
        assert eps[m - 1] - 1e-12 <= mu <= eps[m] + 1e-12


class TestAntiPlaneSpectral:
    def test_screw_cluster_uses_shift(self):
        # a cluster straddling the branch cut must see continuous bond
        # lengths: the corrected out-of-plane difference stays near zero
        # at the unrelaxed predictor for bonds crossing the cut
        cfg = build_lattice(LatticeSpec(R_gen=5.0), DefectSpec.screw())
        cl = cluster_indices(cfg, np.array([3.0, 0.3]), 2.0)
        u = np.zeros((cfg.n_sites, 1))
        sd, pd, pos = cluster_spectral(cfg, cl, u, PARAMS)
        pairs, dvec, r = pd
        # without the branch correction, bonds across the cut would carry a
        # spurious out-of-plane jump of roughly one Burgers quantum (>= 0.69
        # for any pair in reach); the corrected winding increment stays small
        assert r.max() < PARAMS.R_cut + 0.15
        assert np.abs(dvec[:, 2]).max() < 0.55
