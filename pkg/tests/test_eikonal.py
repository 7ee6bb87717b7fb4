"""Eikonal distance and geodesic neighborhood tests.

The fast marcher is cross-checked against an independent label-setting
solver written here from scratch: exhaustive linear-scan minimum extraction
(no heap) that recomputes the upwind quadratic from the accepted axis minima
at every relaxation.  Same discretization, different bookkeeping.
"""

import math

import numpy as np
import pytest
from scipy.optimize import brentq

from nlhessian.eikonal import (MetricField, NeighborhoodWeights, build_metric,
                               build_local_weights, build_neighborhoods,
                               fast_march_from)
from nlhessian.grid import ImageGrid, make_disc_slope


def upwind_reference(slowness, source, spacing=1.0):
    """Exhaustive label-setting solution of the same upwind discretization."""
    slowness = np.asarray(slowness, dtype=np.float64)
    height, width = slowness.shape
    n_pix = height * width
    flat = slowness.ravel()
    dist = np.full(n_pix, np.inf)
    done = np.zeros(n_pix, dtype=bool)
    ix, iy = source
    dist[iy * width + ix] = 0.0

    def candidate(nidx):
        niy, nix = divmod(nidx, width)
        a = np.inf
        if nix > 0 and done[nidx - 1]:
            a = dist[nidx - 1]
        if nix < width - 1 and done[nidx + 1]:
            a = min(a, dist[nidx + 1])
        b = np.inf
        if niy > 0 and done[nidx - width]:
            b = dist[nidx - width]
        if niy < height - 1 and done[nidx + width]:
            b = min(b, dist[nidx + width])
        lo, hi = min(a, b), max(a, b)
        fh = flat[nidx] * spacing
        if hi == np.inf or hi - lo >= fh:
            return lo + fh
        return 0.5 * (lo + hi + math.sqrt(2.0 * fh * fh - (lo - hi) ** 2))

    for _ in range(n_pix):
        masked = np.where(done, np.inf, dist)
        idx = int(np.argmin(masked))
        if not np.isfinite(masked[idx]):
            break
        done[idx] = True
        iy, ix = divmod(idx, width)
        for nidx in ((idx - 1) if ix > 0 else -1,
                     (idx + 1) if ix < width - 1 else -1,
                     (idx - width) if iy > 0 else -1,
                     (idx + width) if iy < height - 1 else -1):
            if nidx >= 0 and not done[nidx]:
                dist[nidx] = min(dist[nidx], candidate(nidx))
    return dist.reshape(height, width)


def _smooth_random_image(n, seed):
    rng = np.random.default_rng(seed)
    ix, iy = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float))
    values = np.zeros((n, n))
    for _ in range(4):
        a, b, c = rng.normal(size=3)
        values += 0.1 * np.sin(a + 0.2 * b * ix + 0.2 * c * iy)
    return ImageGrid(values)


# ---------------------------------------------------------------------------
# metric construction

def test_metric_constant_image():
    metric = build_metric(ImageGrid(np.full((8, 8), 0.3)), 0.01)
    np.testing.assert_allclose(metric.slowness, 0.01, atol=1e-15)
    assert metric.gamma == 0.01


def test_metric_plane_and_amplitude_scaling():
    ix, iy = np.meshgrid(np.arange(10.0), np.arange(10.0))
    phi1 = build_metric(ImageGrid(0.1 * ix), 0.01).slowness
    np.testing.assert_allclose(phi1, 0.1 ** 2 + 0.01, atol=1e-15)
    # doubling the amplitude quadruples the gradient part
    phi2 = build_metric(ImageGrid(0.2 * ix), 0.01).slowness
    np.testing.assert_allclose(phi2 - 0.01, 4 * (phi1 - 0.01), atol=1e-15)


def test_metric_requires_positive_gamma():
    img = ImageGrid(np.zeros((8, 8)))
    with pytest.raises(ValueError):
        build_metric(img, 0.0)
    with pytest.raises(ValueError):
        build_metric(img, -1.0)
    with pytest.raises(ValueError):
        MetricField(np.full((4, 4), 0.5), gamma=1.0)  # slowness below gamma


# ---------------------------------------------------------------------------
# fast marching basics

def test_unit_metric_axis_and_diagonal():
    slowness = np.ones((9, 9))
    dist, _ = fast_march_from((4, 4), slowness)
    assert dist[4, 4] == 0.0
    for iy, ix in ((4, 3), (4, 5), (3, 4), (5, 4)):
        assert dist[iy, ix] == pytest.approx(1.0, abs=1e-15)
    # diagonal solves 2*(c-1)^2 = 1; root found independently
    root = brentq(lambda c: 2 * (c - 1.0) ** 2 - 1.0, 1.0, 3.0, xtol=1e-14)
    assert dist[5, 5] == pytest.approx(root, abs=1e-12)
    assert dist[5, 5] == pytest.approx((2 + math.sqrt(2)) / 2, abs=1e-12)


def test_acceptance_order_monotone():
    rng = np.random.default_rng(2)
    slowness = rng.uniform(0.5, 2.0, size=(12, 12))
    dist, order = fast_march_from((3, 7), slowness)
    flat = dist.ravel()[order]
    assert np.all(np.diff(flat) >= -1e-15)
    assert len(order) == 144


def test_matches_label_setting_reference():
    rng = np.random.default_rng(7)
    for _ in range(3):
        slowness = rng.uniform(0.5, 2.0, size=(16, 16))
        src = (int(rng.integers(16)), int(rng.integers(16)))
        dist, _ = fast_march_from(src, slowness)
        ref = upwind_reference(slowness, src)
        assert np.max(np.abs(dist - ref)) <= 1e-12


def test_distance_scales_with_slowness():
    rng = np.random.default_rng(3)
    slowness = rng.uniform(0.5, 2.0, size=(10, 10))
    d1, o1 = fast_march_from((2, 2), slowness)
    d3, o3 = fast_march_from((2, 2), 3.0 * slowness)
    np.testing.assert_allclose(d3, 3.0 * d1, rtol=1e-13)
    assert np.array_equal(o1, o3)


def test_spacing_scales_distances():
    slowness = np.ones((8, 8))
    d1, _ = fast_march_from((4, 4), slowness, spacing=1.0)
    d2, _ = fast_march_from((4, 4), slowness, spacing=0.5)
    np.testing.assert_allclose(d2, 0.5 * d1, rtol=1e-14)


def test_metric_field_spacing_used():
    metric = MetricField(np.ones((8, 8)), gamma=1.0, spacing=0.5)
    d, _ = fast_march_from((4, 4), metric)
    assert d[4, 5] == pytest.approx(0.5, abs=1e-15)


def test_early_stop_prefix():
    rng = np.random.default_rng(5)
    slowness = rng.uniform(0.5, 2.0, size=(10, 10))
    dist_full, order_full = fast_march_from((5, 5), slowness)
    dist5, order5 = fast_march_from((5, 5), slowness, stop_count=5)
    assert len(order5) == 5
    assert np.array_equal(order5, order_full[:5])
    assert np.isinf(dist5).sum() == 100 - 5
    np.testing.assert_allclose(dist5.ravel()[order5],
                               dist_full.ravel()[order5], atol=0)


def test_barrier_ring_contains_march():
    # A very slow ring: the first acceptances stay strictly inside it.
    slowness = np.ones((15, 15))
    for i in range(15):
        for ring in (3, 11):
            slowness[ring, i] = 1e12
            slowness[i, ring] = 1e12
    inner = [iy * 15 + ix for iy in range(4, 11) for ix in range(4, 11)]
    _, order = fast_march_from((7, 7), slowness, stop_count=45)
    assert set(order) <= set(inner)


def test_fast_march_validation():
    with pytest.raises(ValueError, match="outside"):
        fast_march_from((4, 0), np.ones((4, 4)))
    with pytest.raises(ValueError, match="positive and finite"):
        fast_march_from((0, 0), np.zeros((4, 4)))
    with pytest.raises(ValueError, match="positive and finite"):
        fast_march_from((0, 0), np.full((4, 4), np.inf))
    with pytest.raises(ValueError, match="stop_count"):
        fast_march_from((0, 0), np.ones((4, 4)), stop_count=0)


# ---------------------------------------------------------------------------
# neighborhoods

def test_uniform_metric_m4_gives_axis_neighbors():
    nw = build_neighborhoods(ImageGrid(np.full((9, 9), 0.7)), gamma=0.01, m=4)
    idx = 4 * 9 + 4
    expect = {idx - 1, idx + 1, idx - 9, idx + 9}
    assert set(nw.nbr_idx[idx]) == expect


def test_neighborhoods_sorted_unique_no_self():
    g = _smooth_random_image(8, seed=11)
    nw = build_neighborhoods(g, gamma=0.01, m=6)
    for idx in range(64):
        row = nw.nbr_idx[idx]
        assert idx not in row
        assert len(set(row.tolist())) == 6
        assert np.all(np.diff(nw.nbr_dist[idx]) >= -1e-15)
        assert np.all((row >= 0) & (row < 64))
    assert np.all(nw.nbr_weight == 1.0)


def test_neighborhoods_translation_equivariant_on_constant():
    nw = build_neighborhoods(ImageGrid(np.zeros((11, 11))), gamma=0.01, m=8)
    width = 11

    def offsets(idx):
        iy, ix = divmod(idx, width)
        ys, xs = np.divmod(nw.nbr_idx[idx], width)
        return sorted(zip((xs - ix).tolist(), (ys - iy).tolist()))

    center = offsets(5 * width + 5)
    for iy in (4, 5, 6):
        for ix in (4, 5, 6):
            assert offsets(iy * width + ix) == center


def test_neighborhood_size_validation():
    g = ImageGrid(np.zeros((3, 3)))
    with pytest.raises(ValueError, match="cannot supply"):
        build_neighborhoods(g, gamma=0.01, m=9)
    with pytest.raises(ValueError, match="M must be"):
        build_neighborhoods(g, gamma=0.01, m=0)


def test_disc_edge_neighborhoods_stay_inside():
    # Clean disc-slope scene: a pixel one pixel inside the disc edge keeps at
    # least 10 of its 12 geodesic neighbors inside the disc.
    img = make_disc_slope(64, 20, base=0.1, slope=0.01, jump=0.4)
    nw = build_neighborhoods(img, gamma=0.01, m=12)
    ix, iy = 13, 32  # distance 19 from center, radius 20
    assert (ix - 32) ** 2 + (iy - 32) ** 2 < 400
    assert (ix - 1 - 32) ** 2 + (iy - 32) ** 2 >= 400
    row = nw.nbr_idx[iy * 64 + ix]
    ys, xs = np.divmod(row, 64)
    inside = (xs - 32) ** 2 + (ys - 32) ** 2 < 400
    assert inside.sum() >= 10


def test_neighborhood_text_dump():
    import io

    nw = build_neighborhoods(ImageGrid(np.zeros((4, 4))), gamma=0.01, m=3)
    buf = io.StringIO()
    nw.dump_text(buf)
    lines = buf.getvalue().strip().split("\n")
    assert len(lines) == 16 * 3
    ix, iy, dx, dy, dist = lines[0].split(",")
    assert (int(ix), int(iy)) == (0, 0)
    assert float(dist) > 0


# ---------------------------------------------------------------------------
# local weights

def _synthetic_nw(nbr_idx, shape):
    nbr_idx = np.asarray(nbr_idx, dtype=np.int64)
    m = nbr_idx.shape[1]
    return NeighborhoodWeights(m=m, shape=shape, spacing=1.0,
                               nbr_idx=nbr_idx,
                               nbr_dist=np.ones(nbr_idx.shape),
                               nbr_weight=np.ones(nbr_idx.shape))


def test_local_weights_symmetric_ring():
    # 6 pixels in a ring, each pointing at its 2 ring neighbors: every pixel
    # is referenced twice, so omega = m / (m + 1) everywhere.
    nbr_idx = [[(i - 1) % 6, (i + 1) % 6] for i in range(6)]
    omega = build_local_weights(_synthetic_nw(nbr_idx, (1, 6)))
    np.testing.assert_allclose(omega, 2.0 / 3.0, atol=1e-15)


def test_local_weights_isolated_outlier():
    # Pixel 3 appears in nobody's neighborhood: omega(3) = m / 1 = m.
    nbr_idx = [[1, 2], [0, 2], [0, 1], [0, 1], [0, 1], [0, 1]]
    omega = build_local_weights(_synthetic_nw(nbr_idx, (1, 6)), m=2)
    assert omega[3] == pytest.approx(2.0)
    assert omega[0] == pytest.approx(2.0 / 6.0)


def test_local_weights_counting_identity():
    g = _smooth_random_image(8, seed=13)
    nw = build_neighborhoods(g, gamma=0.01, m=5)
    omega = build_local_weights(nw)
    referenced = np.bincount(nw.nbr_idx.ravel(), minlength=64)
    total = np.sum((1.0 + referenced) * omega)
    assert total == pytest.approx(5 * 64, rel=1e-12)
