"""Generation metrics over precomputed embeddings and class posteriors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .featureio import read_array, read_manifest

SYM_TOL = 1e-12
EIG_REJECT_TOL = 1e-6
ROW_SUM_TOL = 1e-9


class MetricError(ValueError):
    pass


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = len(self.mean)
        if self.cov.shape != (d, d):
            raise MetricError(f"cov shape {self.cov.shape} does not match mean dim {d}")
        if self.n < 2:
            raise MetricError("GaussianStats needs n >= 2")
        if np.abs(self.cov - self.cov.T).max() > SYM_TOL * max(1.0, np.abs(self.cov).max()):
            raise MetricError("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return len(self.mean)


def gaussian_stats(embeddings) -> GaussianStats:
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < 2:
        raise MetricError("need at least 2 embeddings")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (len(x) - 1)
    return GaussianStats(mu, (cov + cov.T) / 2, len(x))


def _psd_eig(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    scale = max(1.0, np.abs(vals).max(initial=0.0))
    if vals.min(initial=0.0) < -EIG_REJECT_TOL * scale:
        raise MetricError(f"{what} has a negative eigenvalue {vals.min():.3g}")
    return np.clip(vals, 0.0, None), vecs


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """``Tr((A B)^(1/2))`` through the symmetric form ``A^(1/2) B A^(1/2)``."""
    va, ua = _psd_eig(cov_a, "covariance")
    _psd_eig(cov_b, "covariance")
    a_half = (ua * np.sqrt(va)) @ ua.T
    inner = a_half @ cov_b @ a_half
    vi, _ = _psd_eig(inner, "similarity transform")
    return float(np.sqrt(vi).sum())


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.dim != b.dim:
        raise MetricError(f"dimension mismatch {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    tr = np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt_product(a.cov, b.cov)
    return max(0.0, float(diff @ diff + tr))


def validate_probs(p) -> np.ndarray:
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if p.ndim != 2:
        raise MetricError("probability matrix must be 2-d")
    if (p < 0).any():
        raise MetricError("negative probability")
    if (p > 1).any():
        raise MetricError("probability above 1")
    if np.abs(p.sum(axis=1) - 1.0).max() > ROW_SUM_TOL:
        raise MetricError("rows must sum to 1")
    return p


def inception_score(p) -> float:
    """exp of the mean KL between each row and the column-mean marginal."""
    p = validate_probs(p)
    marginal = p.mean(axis=0)
    pos = p > 0
    safe_p = np.where(pos, p, 1.0)
    safe_m = np.where(pos, marginal[None, :], 1.0)
    kl = np.where(pos, p * (np.log(safe_p) - np.log(safe_m)), 0.0).sum(axis=1)
    return float(math.exp(max(kl.mean(), 0.0)))


def framewise_clip_similarity(embeddings) -> float:
    """Average of anchor-to-first and consecutive-frame cosine over frames 2..T."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or len(e) < 2:
        raise MetricError("need a [T>=2, d] embedding matrix")
    norms = np.linalg.norm(e, axis=1)
    if (norms == 0).any():
        raise MetricError("zero-norm embedding row")
    u = e / norms[:, None]
    first = u[1:] @ u[0]
    consec = (u[1:] * u[:-1]).sum(axis=1)
    return float((0.5 * (first + consec)).sum() / (len(e) - 1))


# ---------------------------------------------------------------- protocol

@dataclass
class EvalConfig:
    n: int = 2048
    clip_len: int = 16
    seed: int = 0
    stratified: bool = False
    pool: str = "flatten"   # how a clip window becomes one vector: flatten | mean


def _stratified_pick(labels: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Largest-remainder quota per class, then uniform picks within each class."""
    classes, counts = np.unique(labels, return_counts=True)
    quota = counts * n / counts.sum()
    base = np.floor(quota).astype(int)
    remainder = n - base.sum()
    order = np.lexsort((classes, -(quota - base)))
    base[order[:remainder]] += 1
    picks = []
    for c, q in zip(classes, base):
        idx = np.flatnonzero(labels == c)
        picks.append(rng.choice(idx, size=q, replace=False))
    return np.sort(np.concatenate(picks)) if picks else np.array([], dtype=int)


def sample_clip_embeddings(videos: list[np.ndarray], cfg: EvalConfig,
                           labels: Optional[list[int]] = None) -> np.ndarray:
    """One random ``clip_len`` window per selected video, pooled to a vector.

    Videos are ``[T, d]`` per-frame embeddings or ``[d]`` clip embeddings.
    """
    if len(videos) < cfg.n:
        raise MetricError(f"{len(videos)} videos available, {cfg.n} requested")
    rng = np.random.default_rng(cfg.seed)
    if cfg.stratified and labels is not None:
        chosen = _stratified_pick(np.asarray(labels), cfg.n, rng)
    else:
        chosen = np.sort(rng.choice(len(videos), size=cfg.n, replace=False))
    out = []
    for i in chosen:
        v = np.asarray(videos[i], dtype=np.float64)
        if v.ndim == 1:
            out.append(v)
            continue
        v = v.reshape(len(v), -1)
        if len(v) < cfg.clip_len:
            raise MetricError(f"video {i} has {len(v)} frames < clip_len {cfg.clip_len}")
        start = int(rng.integers(0, len(v) - cfg.clip_len + 1))
        window = v[start:start + cfg.clip_len]
        out.append(window.mean(axis=0) if cfg.pool == "mean" else window.reshape(-1))
    return np.array(out)


def load_embedding_dir(directory) -> tuple[list[np.ndarray], list[int]]:
    entries = read_manifest(Path(directory) / "manifest.json")
    return [read_array(e["path"]) for e in entries], [int(e.get("class_id", 0) or 0) for e in entries]


def fvd_from_videos(real: list[np.ndarray], fake: list[np.ndarray], cfg: EvalConfig,
                    real_labels=None, fake_labels=None) -> float:
    # both sides draw from the same seed so identical inputs give identical windows
    r = sample_clip_embeddings(real, cfg, real_labels)
    f = sample_clip_embeddings(fake, cfg, fake_labels)
    if r.shape[1] != f.shape[1]:
        raise MetricError(f"embedding dims differ: {r.shape[1]} vs {f.shape[1]}")
    return frechet_distance(gaussian_stats(r), gaussian_stats(f))


def eval_protocol(real_path, fake_path, cfg: Optional[EvalConfig] = None) -> dict:
    """Fréchet distance between clip embeddings sampled from two manifests."""
    cfg = cfg or EvalConfig()
    real, rl = load_embedding_dir(real_path)
    fake, fl = load_embedding_dir(fake_path)
    fvd = fvd_from_videos(real, fake, cfg, rl, fl)
    report = {"fvd": fvd, "n": cfg.n, "clip_len": cfg.clip_len, "seed": cfg.seed}
    if cfg.clip_len == 1:
        report["fid"] = fvd
    return report
