import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dyngrain import grained, oracles


def test_grayscale_luma_weights():
    img = np.zeros((1, 1, 3))
    for c, w in enumerate((0.299, 0.587, 0.114)):
        img[...] = 0
        img[0, 0, c] = 1
        assert grained.to_grayscale(img)[0, 0, 0] == pytest.approx(w, abs=1e-15)
    assert grained.to_grayscale(np.ones((4, 4, 3))).shape == (4, 4, 1)
    with pytest.raises(ValueError):
        grained.to_grayscale(np.ones((4, 4, 2)))


def test_bin_centers_span_unit_interval():
    b = grained.bin_centers(8)
    assert len(b) == 64 and b[0] == 0.0 and b[-1] == 1.0
    np.testing.assert_allclose(np.diff(b), 1 / 63)


def test_constant_tile_entropy_closed_form():
    v, s, sigma = 0.3, 4, 0.01
    tile = np.full((s, s), v)
    p = np.exp(-0.5 * ((v - np.arange(16) / 15) / sigma) ** 2)
    expected = -sum(x * math.log(x) for x in p if x > 0)
    assert grained.entropy_map(tile, s)[0, 0] == pytest.approx(expected, rel=1e-12, abs=1e-15)


def test_region_pdf_in_unit_interval_and_validates():
    x = np.random.default_rng(0).random(16)
    p = grained.region_pdf(x, grained.bin_centers(4))
    assert ((p >= 0) & (p <= 1)).all()
    with pytest.raises(ValueError):
        grained.region_pdf(x, grained.bin_centers(3))
    with pytest.raises(ValueError):
        grained.region_pdf(x, grained.bin_centers(4), sigma=0)


def test_zero_log_zero_is_zero():
    assert grained.region_entropy([0.0, 1.0, 0.0]) == 0.0
    with pytest.raises(ValueError):
        grained.region_entropy([-0.1, 0.5])


@pytest.mark.parametrize("seed", range(5))
def test_vectorized_matches_naive(seed):
    gray = np.random.default_rng(seed).random((32, 24, 1))
    np.testing.assert_allclose(grained.entropy_map(gray, 8), oracles.naive_entropy_map(gray, 8), atol=1e-9, rtol=0)


@given(hnp.arrays(np.float64, (16,), elements=st.floats(0, 1)), st.randoms(use_true_random=False))
def test_entropy_invariant_to_pixel_order(values, rnd):
    perm = list(range(16))
    rnd.shuffle(perm)
    a = grained.entropy_map(values.reshape(4, 4), 4)
    b = grained.entropy_map(values[perm].reshape(4, 4), 4)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_noise_tile_beats_flat_tile():
    gen = np.random.default_rng(3)
    flat = np.full((8, 8), 0.5)
    noise = gen.random((8, 8))
    assert grained.entropy_map(noise, 8)[0, 0] > grained.entropy_map(flat, 8)[0, 0]


def test_region_must_divide_image():
    with pytest.raises(ValueError):
        grained.entropy_map(np.zeros((10, 8)), 4)


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=300, unique=True), st.floats(0, 1))
def test_fine_fraction_within_one_over_n(values, r):
    pool = np.array(values)
    th = grained.calibrate_thresholds([pool], [r, 1 - r])
    fine = oracles.top_m_split(values, (grained.assign_grain_map(pool, th) == 1).tolist())
    assert fine is not None
    assert abs(fine / len(pool) - r) <= 1 / len(pool) + 1e-12


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=3, max_size=200),
       st.lists(st.floats(0.01, 1), min_size=3, max_size=3))
def test_thresholds_monotone_and_last_is_minus_inf(values, raw):
    r = np.array(raw) / sum(raw)
    r[-1] = 1 - r[:-1].sum()
    assume(r[-1] >= 0)
    th = grained.calibrate_thresholds([np.array(values)], r)
    assert th[-1] == -np.inf
    assert all(th[i] >= th[i + 1] for i in range(len(th) - 1))
    g = grained.assign_grain_map(np.array(values), th)
    assert g.min() >= 1 and g.max() <= 3


def test_three_level_fractions():
    pool = np.random.default_rng(1).permutation(1000).astype(float)
    th = grained.calibrate_thresholds([pool], [0.2, 0.3, 0.5])
    g = grained.assign_grain_map(pool, th)
    assert [(g == i).sum() for i in (1, 2, 3)] == [200, 300, 500]
    # the finest level holds the largest entropies
    assert pool[g == 1].min() > pool[g == 2].max() > pool[g == 3].max()


def test_ties_go_coarser():
    pool = np.full(50, 2.0)
    g = grained.assign_grain_map(pool, grained.calibrate_thresholds([pool], [0.5, 0.5]))
    assert (g == 2).all()


@pytest.mark.parametrize("r,level", [(0.0, 2), (1.0, 1)])
def test_degenerate_ratios(r, level):
    maps = [np.random.default_rng(i).random((4, 4)) for i in range(3)]
    th = grained.calibrate_thresholds(maps, [r, 1 - r])
    assert all((grained.assign_grain_map(m, th) == level).all() for m in maps)


def test_invalid_ratios():
    for bad in ([0.7, 0.7], [1.2, -0.2], [1.0]):
        with pytest.raises(ValueError):
            grained.validate_ratios(bad)
    with pytest.raises(ValueError):
        grained.calibrate_thresholds([np.zeros((0,))], [0.5, 0.5])


def test_per_image_mode_hits_ratio_in_each_image():
    maps = [np.random.default_rng(i).random((8, 8)) * (i + 1) for i in range(4)]
    grains = grained.grain_maps_for_corpus(maps, [0.25, 0.75], per_image=True)
    assert all(grained.fine_fraction(g) == 0.25 for g in grains)
    pooled = grained.grain_maps_for_corpus(maps, [0.25, 0.75])
    assert np.mean([grained.fine_fraction(g) for g in pooled]) == 0.25
    assert grained.fine_fraction(pooled[0]) < grained.fine_fraction(pooled[3])


def test_region_grid():
    grid = grained.RegionGrid.for_image(64, 32, 8)
    assert (grid.rows, grid.cols, grid.n_regions) == (8, 4, 32)
    with pytest.raises(ValueError):
        grained.RegionGrid.for_image(60, 64, 8)
