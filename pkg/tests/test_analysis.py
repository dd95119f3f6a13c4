import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import blobs, naive_dft2, naive_dft2_fast, shift_center
from vidalign.analysis import (
    export_pca,
    fft2d,
    frequency_gap,
    high_frequency_ring,
    iicr,
    iicr_points,
    kmeans,
    pca_project,
)
from vidalign.featureio import FeatureMap

CORNERS = [(0, 0), (0, 1), (1, 0), (1, 1)]


def as_map(points, t=1):
    """Pack ``n`` points into a ``[t, h, w, c]`` FeatureMap (n must factor)."""
    n, c = points.shape
    per = n // t
    h = 2
    return FeatureMap(points.reshape(t, h, per // h, c))


# ---------------------------------------------------------------- kmeans

def test_kmeans_two_point_masses():
    pts = np.array([[0.0, 0.0]] * 5 + [[10.0, 0.0]] * 5)
    res = kmeans(pts, 2, seed=0)
    assert sorted(res.centroids[:, 0].tolist()) == [0.0, 10.0]
    assert res.inertia == 0.0


def test_kmeans_duplicate_points_same_centroids():
    pts = blobs(CORNERS, 0.05, 10, seed=1) * 5
    a = kmeans(pts, 4, seed=3)
    b = kmeans(np.concatenate([pts, pts]), 4, seed=3)
    key = lambda c: sorted(map(tuple, np.round(c, 10)))
    assert key(a.centroids) == key(b.centroids)


def test_kmeans_four_corners():
    pts = blobs(CORNERS, 0.1, 50, seed=11)
    res = kmeans(pts, 4, seed=7)
    corners = np.array(CORNERS, dtype=float)
    # brute force: every centroid near a distinct corner
    d = np.linalg.norm(res.centroids[:, None] - corners[None], axis=-1)
    assert sorted(d.argmin(axis=1).tolist()) == [0, 1, 2, 3]
    assert d.min(axis=1).max() < 0.05


def test_kmeans_invariants():
    pts = np.random.default_rng(0).standard_normal((200, 3))
    res = kmeans(pts, 6, seed=2)
    hist = res.inertia_history
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
    d = ((pts[:, None] - res.centroids[None]) ** 2).sum(-1)
    assert np.array_equal(res.assignments, d.argmin(axis=1))
    assert (res.sigmas >= 0).all()


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans(np.zeros((5, 2)), 2)
    with pytest.raises(ValueError):
        kmeans(np.random.default_rng(0).standard_normal((5, 2)), 1)


# ---------------------------------------------------------------- IICR

def test_iicr_zero_spread_is_infinite():
    pts = np.array([[0.0, 0.0]] * 4 + [[5.0, 5.0]] * 4)
    assert iicr(as_map(pts), 2) == math.inf


def test_iicr_grows_with_separation():
    vals = [iicr_points(blobs([(0, 0), (d, 0)], 0.2, 40, seed=3), 2, seed=0) for d in (1, 2, 4)]
    assert vals[0] < vals[1] < vals[2]


def test_iicr_separable_beats_isotropic():
    centers = np.eye(8) * 6
    sep = iicr_points(blobs(centers, 0.3, 20, seed=1), 8, seed=0)
    iso = iicr_points(np.random.default_rng(1).standard_normal((160, 8)), 8, seed=0)
    assert sep > iso


def test_iicr_pools_all_frames():
    pts = blobs([(0, 0), (4, 0)], 0.1, 8, seed=0)
    fm = as_map(pts, t=2)
    assert fm.frames == 2
    assert iicr(fm, 2) == pytest.approx(iicr_points(pts, 2), rel=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_iicr_rotation_scale_invariance(seed, s):
    rng = np.random.default_rng(seed)
    pts = blobs(rng.uniform(-5, 5, (3, 4)), 0.5, 15, seed=seed)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    base = iicr_points(pts, 3, seed=1)
    assert iicr_points(pts @ q * s, 3, seed=1) == pytest.approx(base, rel=1e-6)


def test_iicr_permutation_invariance():
    pts = blobs([(0, 0), (3, 0), (0, 3)], 0.4, 20, seed=4)
    perm = np.random.default_rng(0).permutation(len(pts))
    a, b = iicr_points(pts, 3, seed=1), iicr_points(pts[perm], 3, seed=1)
    assert a == pytest.approx(b, rel=1e-9)


# ---------------------------------------------------------------- FFT

def test_fft_constant_plane():
    v, h, w = 2.5, 8, 6
    s = fft2d(np.full((h, w), v))
    assert abs(s[h // 2, w // 2]) == pytest.approx(v * h * w, abs=1e-9)
    mask = np.ones((h, w), bool)
    mask[h // 2, w // 2] = False
    assert np.abs(s[mask]).max() < 1e-9


def test_fft_impulse_is_flat():
    x = np.zeros((8, 8))
    x[3, 5] = 1.0
    assert np.allclose(np.abs(fft2d(x)), 1.0, atol=1e-12)


def test_fft_matches_double_sum_and_parseval():
    x = np.random.default_rng(0).standard_normal((8, 8))
    s = fft2d(x)
    assert np.abs(s - shift_center(naive_dft2(x))).max() < 1e-9
    assert abs((x**2).sum() - (np.abs(s) ** 2).sum() / 64) < 1e-9


@pytest.mark.parametrize("h", [2, 3, 5, 7, 8, 12, 16])
def test_fft_sizes_vs_matrix_dft(h):
    rng = np.random.default_rng(h)
    for w in (2, 4, 6, 9, 16):
        x = rng.standard_normal((h, w))
        assert np.abs(fft2d(x, shift=False) - naive_dft2_fast(x)).max() < 1e-9


# ---------------------------------------------------------------- frequency gap

def test_constant_featuremap_gap():
    v, h = 1.5, 8
    fm = FeatureMap(np.full((2, h, h, 3), v))
    rep = frequency_gap(fm, eps=1e-8)
    assert rep.delta_freq == pytest.approx(math.log(1e-8) - math.log(v * h * h + 1e-8), abs=1e-6)


def test_noise_gap_exceeds_blurred():
    rng = np.random.default_rng(0)
    noise = rng.standard_normal((1, 16, 16, 4))
    pad = np.pad(noise, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="wrap")
    blurred = sum(pad[:, 1 + dy:17 + dy, 1 + dx:17 + dx] for dy in (-1, 0, 1) for dx in (-1, 0, 1)) / 9
    assert frequency_gap(FeatureMap(noise)).delta_freq > frequency_gap(FeatureMap(blurred)).delta_freq


def test_ring_definition():
    ring = high_frequency_ring(8)
    u = np.arange(8)[:, None] - 4
    v = np.arange(8)[None, :] - 4
    assert np.array_equal(ring, np.sqrt(u**2 + v**2) > 3.0)
    assert not ring[4, 4]


def test_offset_changes_only_dc():
    x = np.random.default_rng(1).standard_normal((2, 8, 8, 3))
    a = frequency_gap(FeatureMap(x))
    b = frequency_gap(FeatureMap(x + 4.0))
    assert b.hf_mean == pytest.approx(a.hf_mean, abs=1e-9)
    assert b.dc_log != pytest.approx(a.dc_log, abs=1e-3)


def test_frequency_gap_errors():
    with pytest.raises(ValueError):
        frequency_gap(FeatureMap(np.ones((1, 4, 6, 2))))
    with pytest.raises(ValueError):
        frequency_gap(FeatureMap(np.ones((1, 2, 2, 2))))


# ---------------------------------------------------------------- PCA

def test_pca_static_frames_identical(tmp_path):
    frame = np.random.default_rng(0).standard_normal((4, 4, 6))
    fm = FeatureMap(np.stack([frame] * 3))
    paths = export_pca(pca_project(fm), tmp_path)
    assert [p.name for p in paths] == ["pca_f0000.ppm", "pca_f0001.ppm", "pca_f0002.ppm"]
    data = [p.read_bytes() for p in paths]
    assert data[0] == data[1] == data[2]
    assert data[0].startswith(b"P6\n4 4\n255\n") and len(data[0]) == len(b"P6\n4 4\n255\n") + 48


def test_pca_line_explains_everything():
    direction = np.array([1.0, 2.0, -1.0, 0.5])
    tokens = np.linspace(-1, 1, 32)[:, None] * direction + 3.0
    res = pca_project(FeatureMap(tokens.reshape(2, 4, 4, 4)))
    assert res.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-12)


def test_pca_full_reconstruction_and_orthonormality():
    x = np.random.default_rng(2).standard_normal((2, 4, 4, 5))
    res = pca_project(FeatureMap(x), dims=5)
    tokens = x.reshape(-1, 5)
    recon = res.scores.reshape(-1, 5) @ res.components.T + res.mean
    assert np.abs(recon - tokens).max() < 1e-9
    assert np.abs(res.components.T @ res.components - np.eye(5)).max() < 1e-9
    assert res.images.min() >= 0 and res.images.max() <= 1


def test_pca_rejects_constant_tokens():
    with pytest.raises(ValueError):
        pca_project(FeatureMap(np.ones((1, 4, 4, 3))))
