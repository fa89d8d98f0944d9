"""Lattice generation, defect bookkeeping, and lattice-function norms."""

import numpy as np
import pytest

from aqmm import lattice
from aqmm.lattice import (
    TRI_GENERATOR, DefectSpec, LatticeSpec, ResourceError, branch_crossing,
    cross2,
    build_lattice, canonical_triangulation, decay_seminorm, grad_norm,
    hat_volumes, hex_ring, lattice_ball, predictor_differences, predictor_u0,
    stencil_offsets, validate_configuration,
)


def brute_ball(generator, radius):
    """Independent O(box^2) scan for lattice points within radius."""
    A = np.asarray(generator)
    pts = set()
    n = int(np.ceil(radius / min(np.linalg.norm(A[:, 0]),
                                 np.linalg.norm(A[:, 1])))) + 2
    for i in range(-3 * n, 3 * n + 1):
        for j in range(-3 * n, 3 * n + 1):
            x = A @ (i, j)
            if x @ x <= radius * radius + 1e-9:
                pts.add((i, j))
    return pts


class TestLatticeBall:
    def test_matches_brute_force_scan(self):
        for radius in (1.0, 3.5, 6.0):
            coords = lattice_ball(TRI_GENERATOR, radius)
            got = {tuple(c) for c in coords}
            assert got == brute_ball(TRI_GENERATOR, radius)

    def test_origin_first_and_order_deterministic(self):
        a = lattice_ball(TRI_GENERATOR, 5.0)
        b = lattice_ball(TRI_GENERATOR, 5.0)
        assert np.array_equal(a, b)
        assert tuple(a[0]) == (0, 0)
        r2 = ((a @ TRI_GENERATOR.T) ** 2).sum(axis=1)
        assert np.all(np.diff(np.round(r2, 9)) >= 0)

    def test_off_center(self):
        coords = lattice_ball(TRI_GENERATOR, 2.0, center_coord=(3, -1))
        cen = np.array([3, -1]) @ TRI_GENERATOR.T
        pos = coords @ TRI_GENERATOR.T
        assert np.all(np.linalg.norm(pos - cen, axis=1) <= 2.0 + 1e-8)
        assert tuple(coords[0]) == (3, -1)

    def test_stretched_generator(self):
        gen = 1.15 * TRI_GENERATOR
        coords = lattice_ball(gen, 4.0)
        assert {tuple(c) for c in coords} == brute_ball(gen, 4.0)


class TestHexRing:
    def test_centered_hexagonal_counts(self):
        coords = lattice_ball(TRI_GENERATOR, 12.0)
        rings = hex_ring(coords)
        for k in range(5):
            # 1 + 3k(k+1) sites within hexagonal shell k
            assert (rings <= k).sum() == 1 + 3 * k * (k + 1)

    def test_ring_one_is_nearest_neighbours(self):
        coords = lattice_ball(TRI_GENERATOR, 1.5)
        rings = hex_ring(coords)
        d = np.linalg.norm(coords @ TRI_GENERATOR.T, axis=1)
        assert np.allclose(d[rings == 1], 1.0)


class TestBuildLattice:
    def test_vacancy_removes_origin(self):
        lat = LatticeSpec(R_gen=6.0)
        full = build_lattice(lat, DefectSpec.none())
        vac = build_lattice(lat, DefectSpec.vacancy())
        assert vac.n_sites == full.n_sites - 1
        assert vac.lookup(np.array([[0, 0]]))[0] == -1
        assert np.min(np.linalg.norm(vac.sites, axis=1)) > 0.9

    def test_lookup_roundtrip(self):
        cfg = build_lattice(LatticeSpec(R_gen=5.0), DefectSpec.vacancy())
        idx = cfg.lookup(cfg.coords)
        assert np.array_equal(idx, np.arange(cfg.n_sites))
        assert cfg.lookup(np.array([[99, 99]]))[0] == -1

    def test_microcrack_removes_row(self):
        lat = LatticeSpec(R_gen=8.0)
        full = build_lattice(lat, DefectSpec.none())
        crack = build_lattice(lat, DefectSpec.microcrack(length=5))
        assert crack.n_sites == full.n_sites - 5
        assert crack.defect.R_def == 2.0
        for i in range(-2, 3):
            assert crack.lookup(np.array([[i, 0]]))[0] == -1

    def test_screw_keeps_all_sites(self):
        lat = LatticeSpec(R_gen=6.0)
        scr = build_lattice(lat, DefectSpec.screw())
        full = build_lattice(lat, DefectSpec.none())
        assert scr.n_sites == full.n_sites
        assert scr.dim_m == 1
        assert scr.u0.shape == (scr.n_sites, 1)
        # center sits off every lattice row
        assert np.min(np.abs(scr.sites[:, 1] - scr.defect.center[1])) > 0.05

    def test_dist_measured_from_core(self):
        crack = build_lattice(LatticeSpec(R_gen=8.0), DefectSpec.microcrack())
        # removed sites span x in [-2, 2]: a site near (3, 0) is close to core
        d = crack.defect.dist(np.array([4.0, 0.0]))
        assert abs(d - 2.0) < 1e-12

    def test_neighbor_table(self):
        cfg = build_lattice(LatticeSpec(R_gen=4.0), DefectSpec.vacancy())
        offs = np.array([[1, 0], [0, 1]])
        table = cfg.neighbor_table(offs)
        assert table.shape == (cfg.n_sites, 2)
        k = cfg.lookup(np.array([[2, 1]]))[0]
        assert table[k, 0] == cfg.lookup(np.array([[3, 1]]))[0]
        assert table[k, 1] == cfg.lookup(np.array([[2, 2]]))[0]


class TestScrewPredictor:
    def setup_method(self):
        self.cfg = build_lattice(LatticeSpec(R_gen=8.0), DefectSpec.screw())
        self.d = self.cfg.defect

    def test_predictor_range(self):
        u0 = predictor_u0(self.d, self.cfg.sites)
        assert np.all(u0 >= 0.0) and np.all(u0 < self.d.burgers)

    def test_branch_crossing_signs(self):
        c = self.d.center
        up = branch_crossing(self.d, c + [1.0, -0.3], c + [1.0, 0.3])
        down = branch_crossing(self.d, c + [1.0, 0.3], c + [1.0, -0.3])
        left = branch_crossing(self.d, c + [-1.0, -0.3], c + [-1.0, 0.3])
        flat = branch_crossing(self.d, c + [1.0, 0.2], c + [2.0, 0.4])
        assert up[0] == 1.0 and down[0] == -1.0
        assert left[0] == 0.0 and flat[0] == 0.0

    def test_corrected_differences_match_winding_angle(self):
        # corrected difference along any bond equals b * dtheta / (2 pi)
        # with dtheta the principal-value angle increment
        cfg, d = self.cfg, self.d
        offs = np.array([[1, 0], [0, 1], [-1, 1]])
        table = cfg.neighbor_table(offs)
        for k in range(3):
            ok = np.where(table[:, k] >= 0)[0]
            i, j = ok, table[ok, k]
            got = predictor_differences(cfg, i, j)[:, 0]
            ti = np.arctan2(*(cfg.sites[i] - d.center).T[::-1])
            tj = np.arctan2(*(cfg.sites[j] - d.center).T[::-1])
            dt = np.arctan2(np.sin(tj - ti), np.cos(tj - ti))
            want = d.burgers * dt / (2.0 * np.pi)
            assert np.allclose(got, want, atol=1e-12)

    def test_burgers_loop_sum(self):
        # hexagonal loop around the core picks up exactly one quantum;
        # a loop elsewhere picks up none
        cfg, d = self.cfg, self.d
        loop = [(2, -1), (2, 1), (-1, 2), (-2, 1), (-2, -1), (1, -2), (2, -1)]
        idx = cfg.lookup(np.array(loop))
        assert np.all(idx >= 0)
        total = predictor_differences(cfg, idx[:-1], idx[1:])[:, 0].sum()
        assert abs(abs(total) - d.burgers) < 1e-12
        away = [(3, 1), (4, 1), (3, 2), (3, 1)]
        idx = cfg.lookup(np.array(away))
        total = predictor_differences(cfg, idx[:-1], idx[1:])[:, 0].sum()
        assert abs(total) < 1e-12

    def test_point_defect_differences_vanish(self):
        cfg = build_lattice(LatticeSpec(R_gen=4.0), DefectSpec.vacancy())
        out = predictor_differences(cfg, np.array([0, 1]), np.array([2, 3]))
        assert out.shape == (2, 2)
        assert np.all(out == 0.0)


class TestTriangulationAndNorms:
    def setup_method(self):
        self.cfg = build_lattice(LatticeSpec(R_gen=6.0), DefectSpec.vacancy())
        self.mesh = canonical_triangulation(self.cfg)

    def test_positive_orientation(self):
        p = self.mesh.nodes[self.mesh.triangles]
        det = cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        assert np.all(det > 0)

    def test_covers_convex_hull_area(self):
        from scipy.spatial import ConvexHull

        p = self.mesh.nodes[self.mesh.triangles]
        area = 0.5 * np.abs(cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]))
        hull = ConvexHull(self.mesh.nodes)
        assert abs(area.sum() - hull.volume) < 1e-9

    def test_hat_volumes_sum_to_area(self):
        p = self.mesh.nodes[self.mesh.triangles]
        area = 0.5 * np.abs(cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]))
        vol = hat_volumes(self.mesh)
        assert abs(vol.sum() - area.sum()) < 1e-9
        assert np.all(vol > 0)

    def test_radius_restriction(self):
        mesh = canonical_triangulation(self.cfg, radius=3.0)
        assert np.all(np.linalg.norm(mesh.nodes, axis=1) <= 3.0 + 1e-8)
        assert np.array_equal(
            mesh.nodes, self.cfg.sites[mesh.node_sites])

    def test_grad_norm_linear_field(self):
        # u(x) = a . x has |grad u|_L2 = |a| sqrt(area)
        a = np.array([0.3, -0.7])
        vals = self.mesh.nodes @ a
        p = self.mesh.nodes[self.mesh.triangles]
        area = 0.5 * np.abs(cross2(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]))
        want = np.linalg.norm(a) * np.sqrt(area.sum())
        assert abs(grad_norm(self.mesh, vals) - want) < 1e-10

    def test_grad_norm_matches_per_element_loop(self):
        rng = np.random.default_rng(3)
        vals = rng.normal(size=(len(self.mesh.nodes), 2))
        total = 0.0
        for tri in self.mesh.triangles:
            p = self.mesh.nodes[tri]
            B = np.array([p[1] - p[0], p[2] - p[0]]).T
            area = 0.5 * abs(np.linalg.det(B))
            for c in range(2):
                du = np.array([vals[tri[1], c] - vals[tri[0], c],
                               vals[tri[2], c] - vals[tri[0], c]])
                g = np.linalg.solve(B.T, du)
                total += area * (g @ g)
        assert abs(grad_norm(self.mesh, vals) - np.sqrt(total)) < 1e-10

    def test_grad_norm_constant_is_zero(self):
        assert grad_norm(self.mesh, np.ones(len(self.mesh.nodes))) < 1e-14


class TestSeminormsAndGuards:
    def test_stencil_offsets_symmetric_no_origin(self):
        offs = stencil_offsets(TRI_GENERATOR, 3.0)
        assert not any((o == 0).all() for o in offs)
        have = {tuple(o) for o in offs}
        assert all((-i, -j) in have for i, j in have)
        lens = np.linalg.norm(offs @ TRI_GENERATOR.T, axis=1)
        assert lens.max() <= 3.0 + 1e-9 and lens.min() >= 1.0 - 1e-9

    def test_decay_seminorm_constant_zero(self):
        cfg = build_lattice(LatticeSpec(R_gen=5.0), DefectSpec.vacancy())
        u = np.ones((cfg.n_sites, 2))
        assert decay_seminorm(cfg, u) == 0.0

    def test_decay_seminorm_matches_double_loop(self):
        cfg = build_lattice(LatticeSpec(R_gen=4.0), DefectSpec.vacancy())
        rng = np.random.default_rng(11)
        u = rng.normal(size=(cfg.n_sites, 2))
        gamma, R = 0.8, 2.5
        total = 0.0
        coord_of = {tuple(c): i for i, c in enumerate(cfg.coords)}
        for rho in stencil_offsets(cfg.lattice.generator, R):
            length = np.linalg.norm(cfg.lattice.generator @ rho)
            for i, c in enumerate(cfg.coords):
                j = coord_of.get((c[0] + rho[0], c[1] + rho[1]))
                if j is not None:
                    d = u[j] - u[i]
                    total += np.exp(-2 * gamma * length) * (d @ d)
        got = decay_seminorm(cfg, u, gamma=gamma, R_interact=R)
        assert abs(got - np.sqrt(total)) < 1e-10

    def test_validate_configuration(self):
        cfg = build_lattice(LatticeSpec(R_gen=5.0), DefectSpec.vacancy())
        ok, worst = validate_configuration(cfg, cfg.sites)
        assert ok and abs(worst - 1.0) < 1e-12
        squeezed = cfg.sites.copy()
        k = cfg.lookup(np.array([[1, 0]]))[0]
        m = cfg.lookup(np.array([[2, 0]]))[0]
        squeezed[k] = 0.3 * squeezed[k] + 0.7 * squeezed[m]
        ok, worst = validate_configuration(cfg, squeezed)
        assert not ok and worst < 0.5

    def test_resource_error_is_runtime_error(self):
        assert issubclass(ResourceError, RuntimeError)
        with pytest.raises(RuntimeError):
            raise ResourceError("size guard")
