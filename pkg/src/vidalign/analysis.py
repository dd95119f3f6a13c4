"""Encoder-suitability analyses: cluster consistency ratio, spectral gap, PCA."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .featureio import FeatureMap

FREQ_EPS = 1e-8
RING_FRACTION = 0.75


# ---------------------------------------------------------------- k-means

@dataclass
class ClusterResult:
    k: int
    assignments: np.ndarray
    centroids: np.ndarray
    sigmas: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)
    iterations: int = 0


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # direct differences rather than the expanded form: exact zeros matter for ties
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkc,nkc->nk", diff, diff)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy k-means++: each round draws ``2 + ln k`` D^2-weighted candidates and
    keeps the one that lowers the potential most (first candidate wins ties)."""
    n = len(points)
    trials = 2 + int(math.log(k))
    centers = [points[rng.integers(n)]]
    d2 = _sq_dists(points, centers[0][None])[:, 0]
    for _ in range(1, k):
        cand = rng.choice(n, size=trials, p=d2 / d2.sum())
        cand_d2 = np.minimum(d2[None, :], _sq_dists(points[cand], points))
        best = int(np.argmin(cand_d2.sum(axis=1)))
        centers.append(points[cand[best]])
        d2 = cand_d2[best]
    return np.array(centers)


def cluster_sigmas(points: np.ndarray, assignments: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Per cluster: sqrt of the mean squared distance of members to the centroid."""
    k = len(centroids)
    sig = np.zeros(k)
    for i in range(k):
        members = points[assignments == i]
        if len(members):
            sig[i] = math.sqrt(((members - centroids[i]) ** 2).sum(axis=1).mean())
    return sig


def kmeans(points, k: int, seed: int = 0, max_iters: int = 100) -> ClusterResult:
    """Lloyd's algorithm with k-means++ seeding.

    Ties in nearest-centroid assignment go to the lowest index; an empty
    cluster keeps its previous centroid so inertia never increases.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be [n, c]")
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(np.unique(points, axis=0)) < k:
        raise ValueError(f"fewer than {k} distinct points")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(points, k, rng)
    assign = np.argmin(_sq_dists(points, centroids), axis=1)
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        new_centroids = centroids.copy()
        for i in range(k):
            members = points[assign == i]
            if len(members):
                new_centroids[i] = members.mean(axis=0)
        centroids = new_centroids
        d = _sq_dists(points, centroids)
        history.append(float(d[np.arange(len(points)), assign].sum()))
        new_assign = np.argmin(d, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    d = _sq_dists(points, centroids)
    inertia = float(d[np.arange(len(points)), assign].sum())
    return ClusterResult(
        k=k,
        assignments=assign,
        centroids=centroids,
        sigmas=cluster_sigmas(points, assign, centroids),
        inertia=inertia,
        inertia_history=history,
        iterations=it,
    )


# ---------------------------------------------------------------- IICR

def iicr_points(points, k: int, seed: int = 0, max_iters: int = 100) -> float:
    """Min inter-centroid distance over max within-cluster spread.

    Returns ``math.inf`` when every cluster has zero spread.
    """
    res = kmeans(points, k, seed=seed, max_iters=max_iters)
    c = res.centroids
    dist = np.sqrt(_sq_dists(c, c))
    d_inter = dist[~np.eye(k, dtype=bool)].min()
    d_intra = res.sigmas.max()
    if d_intra == 0:
        return math.inf
    return float(d_inter / d_intra)


def iicr(features: FeatureMap, k: int, seed: int = 0, max_iters: int = 100) -> float:
    """IICR over patch tokens pooled from every frame of one video."""
    pts = features.tokens()
    if len(pts) < k:
        raise ValueError(f"{len(pts)} tokens < k={k}")
    return iicr_points(pts, k, seed=seed, max_iters=max_iters)


# ---------------------------------------------------------------- FFT

def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def _fft_first_axis(x: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    if n == 1:
        return x.astype(np.complex128)
    if not _is_pow2(n):
        k = np.arange(n)
        w = np.exp(-2j * np.pi * np.outer(k, k) / n)
        return np.tensordot(w, x, axes=(1, 0))
    even = _fft_first_axis(x[0::2])
    odd = _fft_first_axis(x[1::2])
    tw = np.exp(-2j * np.pi * np.arange(n // 2) / n).reshape((-1,) + (1,) * (x.ndim - 1))
    t = tw * odd
    return np.concatenate([even + t, even - t], axis=0)


def fft_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """1-D DFT along ``axis``: radix-2 for powers of two, direct sum otherwise."""
    x = np.moveaxis(np.asarray(x), axis, 0)
    return np.moveaxis(_fft_first_axis(x), 0, axis)


def fft2d(plane, shift: bool = True) -> np.ndarray:
    """2-D DFT over the last two axes, DC moved to index ``(h//2, w//2)``."""
    plane = np.asarray(plane)
    if plane.ndim < 2 or plane.shape[-2] < 2 or plane.shape[-1] < 2:
        raise ValueError(f"fft2d needs at least 2x2, got {plane.shape}")
    s = fft_axis(fft_axis(plane, -2), -1)
    if shift:
        h, w = plane.shape[-2:]
        s = np.roll(s, (h // 2, w // 2), axis=(-2, -1))
    return s


@dataclass
class FrequencyReport:
    spectrum_log: np.ndarray
    dc_log: float
    hf_mean: float
    delta_freq: float
    ring_size: int


def high_frequency_ring(h: int, w: Optional[int] = None) -> np.ndarray:
    """Mask of bins with radius > 0.75 * h/2 measured from the shifted centre."""
    w = h if w is None else w
    u = np.arange(h) - h // 2
    v = np.arange(w) - w // 2
    rad = np.sqrt(u[:, None] ** 2 + v[None, :] ** 2)
    return rad > RING_FRACTION * (h / 2)


def frequency_gap(features: FeatureMap, eps: float = FREQ_EPS) -> FrequencyReport:
    """Mean high-ring log-magnitude minus DC log-magnitude.

    Log-magnitudes are taken per frame and channel, then averaged.
    """
    vals = features.values
    _, h, w, _ = vals.shape
    if h != w:
        raise ValueError(f"frequency_gap needs a square grid, got {h}x{w}")
    if h < 4:
        raise ValueError("grid too small for a high-frequency ring (need h >= 4)")
    planes = np.transpose(vals, (0, 3, 1, 2))
    mag = np.log(np.abs(fft2d(planes)) + eps)
    m = mag.mean(axis=(0, 1))
    ring = high_frequency_ring(h)
    if not ring.any():
        raise ValueError("empty high-frequency ring")
    dc = float(m[h // 2, w // 2])
    hf = float(m[ring].mean())
    return FrequencyReport(spectrum_log=m, dc_log=dc, hf_mean=hf, delta_freq=hf - dc,
                           ring_size=int(ring.sum()))


# ---------------------------------------------------------------- PCA

@dataclass
class PCAResult:
    images: np.ndarray          # [T, h, w, dims], each component scaled to [0, 1]
    scores: np.ndarray          # [T, h, w, dims], unscaled projections
    components: np.ndarray      # [c, dims], orthonormal columns
    eigenvalues: np.ndarray     # all c, descending
    mean: np.ndarray

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        total = self.eigenvalues.sum()
        return self.eigenvalues[: self.components.shape[1]] / total


def pca_basis(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, descending eigenvalues and eigenvectors (columns) of the token covariance."""
    mean = tokens.mean(axis=0)
    x = tokens - mean
    cov = x.T @ x / max(len(tokens) - 1, 1)
    vals, vecs = np.linalg.eigh((cov + cov.T) / 2)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    # deterministic sign: largest-magnitude entry of each component is positive
    pivot = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[pivot, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return mean, vals, vecs * signs


def pca_project(features: FeatureMap, dims: int = 3) -> PCAResult:
    """Project all frames onto one shared principal basis."""
    tokens = features.tokens()
    if len(tokens) <= dims:
        raise ValueError(f"need more than {dims} tokens")
    if dims > features.channels:
        raise ValueError(f"dims={dims} exceeds channel count {features.channels}")
    if np.all(tokens == tokens[0]):
        raise ValueError("all tokens identical: PCA is undefined")
    mean, vals, vecs = pca_basis(tokens)
    comps = vecs[:, :dims]
    scores = (tokens - mean) @ comps
    lo = scores.min(axis=0)
    span = scores.max(axis=0) - lo
    scaled = np.where(span > 0, (scores - lo) / np.where(span > 0, span, 1.0), 0.0)
    shape = features.values.shape[:3] + (dims,)
    return PCAResult(
        images=scaled.reshape(shape),
        scores=scores.reshape(shape),
        components=comps,
        eigenvalues=vals,
        mean=mean,
    )


def ppm_bytes(rgb: np.ndarray) -> bytes:
    """Binary P6 image from an ``[h, w, 3]`` array in [0, 1]."""
    h, w, _ = rgb.shape
    pix = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()


def export_pca(result: PCAResult, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    imgs = result.images
    if imgs.shape[-1] < 3:
        pad = np.zeros(imgs.shape[:-1] + (3 - imgs.shape[-1],))
        imgs = np.concatenate([imgs, pad], axis=-1)
    paths = []
    for t, frame in enumerate(imgs[..., :3]):
        p = out_dir / f"pca_f{t:04d}.ppm"
        p.write_bytes(ppm_bytes(frame))
        paths.append(p)
    return paths
