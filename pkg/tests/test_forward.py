import io

import numpy as np
import pytest
from scipy.stats import chisquare

from holospi.errors import ConfigError
from holospi.fftutil import centered_ft, centered_ift
from holospi.forward import (ComplexModel, SphereParams, composite_intensity,
                             make_test_object, powder_image,
                             predicted_intensity, rotate_image, simulate_dataset,
                             snr_map, sphere_ft)
from holospi.geometry import azimuthal_average, build_grid


def bisect_first_sphere_zero():
    # root of sin s - s cos s on (pi, 3 pi/2)
    g = lambda s: np.sin(s) - s * np.cos(s)
    a, b = np.pi, 1.5 * np.pi
    for _ in range(200):
        m = 0.5 * (a + b)
        if g(a) * g(m) <= 0:
            b = m
        else:
            a = m
    return 0.5 * (a + b)


S_STAR = 4.493409457909064  # frozen from the bisection oracle below


class TestSphereFt:
    def test_volume_limit(self):
        p = SphereParams(diameter=7.0, contrast=11.0)
        assert sphere_ft(0.0, p) == pytest.approx(11 * np.pi * 343 / 6, rel=1e-12)

    def test_first_zero_matches_bisection_oracle(self):
        s_star = bisect_first_sphere_zero()
        assert s_star == pytest.approx(S_STAR, abs=1e-12)
        p = SphereParams(diameter=7.0, contrast=11.0)
        q_zero = s_star / (np.pi * 7.0)
        assert q_zero == pytest.approx(0.20432, abs=1e-5)
        assert abs(sphere_ft(q_zero, p)) < 1e-9 * sphere_ft(0.0, p)

    def test_diameter_cubed_scaling(self):
        a = sphere_ft(0.0, SphereParams(diameter=7.0, contrast=11.0))
        b = sphere_ft(0.0, SphereParams(diameter=14.0, contrast=11.0))
        assert b == pytest.approx(8.0 * a, rel=1e-14)

    def test_even_and_series_continuity(self):
        p = SphereParams(diameter=5.0, contrast=2.0)
        q = np.array([0.01, 0.2, 0.37])
        assert np.allclose(sphere_ft(q, p), sphere_ft(-q, p))
        # series branch at s = 1e-3 agrees with the direct formula to 1e-8
        s = 1e-3
        q_edge = s / (np.pi * p.diameter)
        direct = (p.contrast * np.pi * p.diameter**3 / 6.0
                  * 3.0 * (np.sin(s) - s * np.cos(s)) / s**3)
        assert sphere_ft(q_edge, p) == pytest.approx(direct, rel=1e-8)

    def test_param_validation(self):
        with pytest.raises(ConfigError):
            SphereParams(diameter=0.0)
        with pytest.raises(ConfigError):
            SphereParams(diameter=5.0, contrast=-1.0)


@pytest.fixture(scope="module")
def small_setup():
    grid = build_grid(33, 2, 15)
    model, density = make_test_object(seed=3, n_blobs=5, size=33, real_size=16)
    return grid, model, density


class TestCompositeIntensity:
    def test_zero_object_gives_sphere_only(self, small_setup):
        grid, model, _ = small_setup
        zero = ComplexModel(33, np.zeros((33, 33), complex), 16)
        params = SphereParams(diameter=5.0, shift=np.array([0.4, -0.2]), contrast=11.0)
        intens = composite_intensity(zero, params, grid)
        fs2 = sphere_ft(grid.qmag(), params) ** 2
        assert np.allclose(intens[grid.mask], fs2[grid.mask], rtol=1e-12)
        assert np.all(intens[~grid.mask] == 0)

    def test_zero_contrast_gives_object_only(self, small_setup):
        grid, model, _ = small_setup
        params = SphereParams(diameter=5.0, contrast=0.0)
        intens = composite_intensity(model, params, grid)
        expect = np.abs(model.values) ** 2
        assert np.allclose(intens[grid.mask], expect[grid.mask], rtol=1e-12)

    def test_half_period_ramp_subtracts(self, small_setup):
        grid, model, _ = small_setup
        # pick a pixel and a shift with q.t = 1/2 exactly
        c = 16
        pix = (c + 4, c)                        # qy = 4/33
        t = np.array([33 / 8.0, 0.0])           # q.t = 0.5
        params = SphereParams(diameter=5.0, shift=t, contrast=11.0)
        intens = composite_intensity(model, params, grid)
        fs = sphere_ft(grid.qmag()[pix], params)
        expect = np.abs(model.values[pix] - fs) ** 2
        assert intens[pix] == pytest.approx(expect, rel=1e-10)

    def test_nonnegative_and_cross_term_identity(self, small_setup):
        grid, model, _ = small_setup
        rng = np.random.default_rng(7)
        for _ in range(5):
            params = SphereParams(diameter=rng.uniform(3, 9),
                                  shift=rng.normal(0, 1, 2),
                                  contrast=rng.uniform(0, 12))
            intens = composite_intensity(model, params, grid)
            assert np.all(intens >= 0)
            fs = sphere_ft(grid.qmag(), params)
            phase = 2 * np.pi * (grid.qcoords[..., 0] * params.shift[0]
                                 + grid.qcoords[..., 1] * params.shift[1])
            cross = 2 * fs * (model.values * np.exp(-1j * phase)).real
            lhs = intens - np.abs(model.values) ** 2 - fs**2
            scale = np.abs(intens).max()
            assert np.all(np.abs(lhs - cross)[grid.mask] <= 1e-9 * scale)


class TestSnrMap:
    def test_zero_object_zero_snr(self, small_setup):
        grid, _, _ = small_setup
        zero = ComplexModel(33, np.zeros((33, 33), complex), 16)
        snr = snr_map(zero, SphereParams(diameter=5.0, contrast=11.0), grid)
        assert np.allclose(snr, 0.0, atol=1e-9)

    def test_aligned_phase_limit(self):
        # |F_s| = 100, F_o = 1 -> SNR = 201/sqrt(10201) ~ 2|F_o|
        i_tot = (100.0 + 1.0) ** 2
        snr = (i_tot - 100.0**2) / np.sqrt(i_tot)
        assert snr == pytest.approx(1.990, abs=1e-3)
        assert snr == pytest.approx(2.0, abs=0.01)

    def test_no_reference_gives_object_modulus(self, small_setup):
        grid, model, _ = small_setup
        snr = snr_map(model, SphereParams(diameter=5.0, contrast=0.0), grid)
        expect = np.abs(model.values)
        sel = grid.mask & (np.abs(model.values) > 1e-9)
        assert np.allclose(snr[sel], expect[sel], rtol=1e-9)

    def test_reference_dominated_limit(self, small_setup):
        grid, model, _ = small_setup
        params = SphereParams(diameter=6.0, contrast=11.0)
        snr = snr_map(model, params, grid)
        fs = np.abs(sphere_ft(grid.qmag(), params))
        fo = np.abs(model.values)
        sel = grid.mask & (fs > 20 * fo) & (fo > 1e-6)
        assert sel.sum() > 100
        assert np.all(np.abs(snr[sel] - 2 * fo[sel]) <= 0.05 * 2 * fo[sel])


class TestRotateImage:
    def test_identity_bit_exact(self, small_setup):
        grid, model, _ = small_setup
        img = composite_intensity(model, SphereParams(5.0, contrast=11.0), grid)
        assert np.array_equal(rotate_image(img, 0.0, grid), img)

    def test_quarter_turn_exact_permutation(self, small_setup):
        grid, model, _ = small_setup
        img = composite_intensity(model, SphereParams(5.0, contrast=11.0), grid)
        assert np.array_equal(rotate_image(img, np.pi / 2, grid), np.rot90(img, 1))

    def test_roundtrip_interpolation_error(self, small_setup):
        grid, model, _ = small_setup
        img = composite_intensity(model, SphereParams(5.0, np.array([0.5, 0.5]), 11.0), grid)
        back = rotate_image(rotate_image(img, 0.6, grid), -0.6, grid)
        annulus = (grid.radius >= 4) & (grid.radius <= 13)
        assert np.abs(back - img)[annulus].max() < 0.02 * img.max()


class TestMakeTestObject:
    def test_deterministic(self):
        m1, d1 = make_test_object(seed=9, n_blobs=10, size=65, real_size=30)
        m2, d2 = make_test_object(seed=9, n_blobs=10, size=65, real_size=30)
        assert np.array_equal(d1, d2)
        assert np.array_equal(m1.values, m2.values)

    def test_support_and_nonnegativity(self):
        _, density = make_test_object(seed=2, n_blobs=12, size=129, real_size=50)
        assert np.all(density >= 0)
        c = 64
        outside = np.ones((129, 129), dtype=bool)
        outside[c - 25:c + 26, c - 25:c + 26] = False
        assert np.all(density[outside] == 0)

    def test_dc_equals_pixel_sum(self):
        model, density = make_test_object(seed=5, n_blobs=8, size=65, real_size=30)
        c = 32
        assert model.values[c, c].real == pytest.approx(density.sum(), rel=1e-12)
        assert abs(model.values[c, c].imag) < 1e-9 * density.sum()


class TestSimulateDataset:
    @pytest.fixture(scope="class")
    def sim(self):
        grid = build_grid(33, 2, 15)
        model, density = make_test_object(seed=3, n_blobs=5, size=33, real_size=16)
        ds, truth = simulate_dataset(model, grid, n_frames=100,
                                     photons_per_frame=1e4, d_mean=5.0,
                                     d_std=0.5, t_std=0.5, contrast=11.0, seed=21)
        return grid, model, ds, truth

    def test_photon_budget(self, sim):
        grid, model, ds, truth = sim
        totals = ds.frame_totals()
        b = 1e4
        assert abs(totals.mean() - b) < 5 * np.sqrt(b)

    def test_validates_against_grid(self, sim):
        grid, model, ds, truth = sim
        ds.validate(grid)
        assert truth.angles.size == ds.n_frames

    def test_deterministic_bytes(self, sim):
        grid, model, ds, truth = sim
        ds2, _ = simulate_dataset(model, grid, n_frames=100, photons_per_frame=1e4,
                                  d_mean=5.0, d_std=0.5, t_std=0.5, contrast=11.0,
                                  seed=21)
        assert np.array_equal(ds.indices, ds2.indices)
        assert np.array_equal(ds.counts, ds2.counts)
        assert np.array_equal(ds.indptr, ds2.indptr)

    def test_uniform_rates_chi_square(self):
        # point object at the origin, no reference -> flat rates on the annulus
        grid = build_grid(33, 2, 15)
        size = 33
        density = np.zeros((size, size))
        density[16, 16] = 1.0
        model = ComplexModel(size, centered_ft(density), 16)
        ds, _ = simulate_dataset(model, grid, n_frames=50, photons_per_frame=2e4,
                                 d_mean=5.0, d_std=0.5, t_std=0.5, contrast=0.0,
                                 seed=5)
        counts = np.zeros(grid.n_pix)
        np.add.at(counts, ds.indices, ds.counts.astype(float))
        observed = counts[grid.valid_flat]
        stat, p = chisquare(observed)
        assert p > 1e-6

    def test_powder_azimuthal_symmetry(self, sim):
        grid, model, ds, truth = sim
        powder = powder_image(ds, grid)
        prof = azimuthal_average(powder, grid)
        expected_ring = prof.mean * prof.count
        for r in range(3, 15):
            if prof.count[r] < 8 or expected_ring[r] < 1e3:
                continue
            sel = (grid.ring_index == r) & grid.mask
            vals = powder[sel]
            rel_var = vals.std() / max(vals.mean(), 1e-9)
            # ring-relative fluctuation: Poisson + orientation averaging
            assert rel_var < 0.5

    def test_expectation_matches_rates(self):
        # frozen latent triple: per-pixel mean over many replicates within 5 SE
        grid = build_grid(33, 2, 15)
        model, _ = make_test_object(seed=3, n_blobs=5, size=33, real_size=16)
        params = SphereParams(diameter=5.0, shift=np.array([0.3, -0.7]), contrast=11.0)
        intens = predicted_intensity(model, grid, 0.9, params)
        rates = intens.ravel()[grid.valid_flat]
        rates = rates * (1e4 / rates.sum())
        rng = np.random.default_rng(42)
        n_rep = 10000
        acc = np.zeros_like(rates)
        for _ in range(n_rep):
            acc += rng.poisson(rates)
        mean = acc / n_rep
        se = np.sqrt(rates / n_rep)
        sel = rates > 1.0
        assert np.all(np.abs(mean[sel] - rates[sel]) < 5 * se[sel])

    def test_rejects_bad_budget(self, sim):
        grid, model, ds, truth = sim
        with pytest.raises(ConfigError):
            simulate_dataset(model, grid, 1, 0.0, 5.0, 0.5, 0.5, 11.0, 1)
        with pytest.raises(ConfigError):
            simulate_dataset(model, grid, 0, 1e4, 5.0, 0.5, 0.5, 11.0, 1)
