import numpy as np
import pytest

from holospi.errors import ConfigError, ContractError
from holospi.geometry import azimuthal_average, build_grid


def brute_force_valid_count(size, r_min, r_max):
    c = (size - 1) / 2.0
    n = 0
    for r in range(size):
        for col in range(size):
            rad = np.hypot(r - c, col - c)
            if r_min <= rad <= r_max:
                n += 1
    return n


def test_default_grid_masking():
    grid = build_grid(185, 4, 92)
    assert grid.center[0] == pytest.approx(92.0)
    # radius 3.9 masked, radius 92.5 masked
    assert not grid.mask[92, 92 + 3]          # radius 3 < 4
    assert grid.mask[92, 92 + 4]
    assert grid.mask[92, 92 + 92]
    assert not grid.mask[0, 0]                # corner radius ~130


def test_small_grid_center_and_corner():
    grid = build_grid(16, 0, 8)
    c = (16 - 1) / 2.0
    center_pix = (8, 8)                        # radius sqrt(0.5) ~ 0.71 <= 8
    assert grid.mask[center_pix]
    assert np.hypot(0 - c, 0 - c) == pytest.approx(10.6066, abs=1e-3)
    assert not grid.mask[0, 0]


def test_valid_count_matches_brute_force():
    grid = build_grid(185, 4, 92)
    # frozen from the brute-force radius scan over all 34225 pixels
    assert grid.n_valid == 26520
    assert grid.n_valid == brute_force_valid_count(185, 4, 92)


def test_qcoords_definition_and_antisymmetry():
    grid = build_grid(33, 2, 15)
    c = (33 - 1) / 2.0
    assert grid.qcoords[5, 7, 0] == pytest.approx((5 - c) / 33)
    assert grid.qcoords[5, 7, 1] == pytest.approx((7 - c) / 33)
    ci = int(c)
    for v in [(1, 2), (5, -3), (10, 10), (0, 13)]:
        qa = grid.qcoords[ci + v[0], ci + v[1]]
        qb = grid.qcoords[ci - v[0], ci - v[1]]
        assert np.all(qa == -qb)


def test_build_grid_validation_errors():
    with pytest.raises(ConfigError, match="size"):
        build_grid(8, 0, 3)
    with pytest.raises(ConfigError, match="r_min"):
        build_grid(32, -1, 10)
    with pytest.raises(ConfigError, match="r_min"):
        build_grid(32, 12, 10)
    with pytest.raises(ConfigError, match="r_max"):
        build_grid(32, 2, 32 * 0.75)


def test_mask_idempotence_and_ring_partition():
    grid = build_grid(65, 3, 32)
    img = np.random.default_rng(0).normal(size=(65, 65))
    once = img * grid.mask
    assert np.array_equal(once * grid.mask, once)
    # every valid pixel in exactly one ring; populations sum to the count
    rings = grid.ring_index[grid.mask]
    assert rings.min() >= 0
    assert np.bincount(rings).sum() == grid.n_valid


def test_azimuthal_average_constant_and_quadratic():
    grid = build_grid(65, 3, 32)
    prof = azimuthal_average(np.full(grid.n_pix, 2.5), grid)
    present = prof.count > 0
    assert np.allclose(prof.mean[present], 2.5)

    img = grid.radius.ravel() ** 2
    prof = azimuthal_average(img, grid)
    # brute-force ring means as the oracle; ring r spans radii [r, r+1),
    # so the mean sits within 0.5 of the ring-center value (r + 0.5)^2
    for r in range(int(3) + 2, 32 - 2):
        sel = (grid.ring_index.ravel() == r) & grid.mask.ravel()
        oracle = img[sel].mean()
        assert prof.mean[r] == pytest.approx(oracle)
        assert abs(np.sqrt(prof.mean[r]) - (r + 0.5)) < 0.5


def test_azimuthal_average_absent_rings_and_errors():
    grid = build_grid(65, 3, 32)
    prof = azimuthal_average(np.ones(grid.n_pix), grid)
    assert prof.count[0] == 0 and np.isnan(prof.mean[0])      # masked center
    assert prof.count[40] == 0 and np.isnan(prof.mean[40])    # beyond r_max
    with pytest.raises(ContractError):
        azimuthal_average(np.ones(10), grid)
