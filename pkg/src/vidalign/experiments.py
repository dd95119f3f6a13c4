"""Paired alignment-vs-baseline runs and the depth/placement/objective ablation grid."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .featureio import DatasetConfig, OracleEncoder, encode, make_synthetic_dataset
from .genmetrics import frechet_distance, gaussian_stats
from .sampling import SamplerConfig, generate_batch
from .training import TrainConfig, TrainResult, heldout_denoise_loss, log_to_csv, train
from .vdit import VDiTConfig

ABLATION_COLUMNS = ("objective", "align_depth", "align_placement", "final_denoise", "final_align",
                    "final_cosine", "heldout_denoise", "log_sha256")


def clip_embedding(clips: Sequence[np.ndarray], encoders: Sequence[OracleEncoder]) -> np.ndarray:
    """One vector per clip: each encoder's features averaged over frames and grid, concatenated."""
    return np.array([np.concatenate([encode(e, c).values.mean(axis=(0, 1, 2)) for e in encoders])
                     for c in clips])


def log_digest(result: TrainResult) -> str:
    return hashlib.sha256(log_to_csv(result.log).encode()).hexdigest()


def params_digest(result: TrainResult) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(result.model.arrays().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class PairResult:
    seed: int
    heldout: dict[float, float]
    fd: dict[float, float]
    digests: dict[float, tuple[str, str]]

    @property
    def aligned_wins(self) -> bool:
        return self.heldout[0.5] < self.heldout[0.0] and self.fd[0.5] < self.fd[0.0]


def alignment_pair(seed: int, base: TrainConfig, train_clips, heldout_clips, n_samples: int = 128,
                   sample_steps: int = 50, gammas=(0.0, 0.5)) -> PairResult:
    """Train with each gamma from the same data and init; score held-out loss and sample FD."""
    real = gaussian_stats(clip_embedding(heldout_clips, base.encoders))
    heldout, fd, digests = {}, {}, {}
    for g in gammas:
        cfg = replace(base, gamma=g, seed=seed, init_seed=seed)
        res = train(cfg, train_clips)
        heldout[g] = heldout_denoise_loss(res.model, cfg, heldout_clips)
        kind = "euler" if cfg.objective == "flow" else "ddim"
        gen, _ = generate_batch(res.checkpoint(), SamplerConfig(kind=kind, steps=sample_steps, seed=seed),
                                n_samples)
        fd[g] = frechet_distance(real, gaussian_stats(clip_embedding(gen, base.encoders)))
        digests[g] = (log_digest(res), params_digest(res))
    return PairResult(seed, heldout, fd, digests)


def alignment_benefit(seeds: Sequence[int] = range(5), steps: int = 500, n_train: int = 64,
                      n_heldout: int = 128, n_samples: int = 128, base: Optional[TrainConfig] = None
                      ) -> list[PairResult]:
    base = base or TrainConfig(steps=steps)
    d = base.model
    dcfg = DatasetConfig(n_clips=n_train, seed=0, frames=d.frames, height=d.height, width=d.width,
                         channels=d.in_channels)
    train_clips, _ = make_synthetic_dataset(dcfg)
    heldout_clips, _ = make_synthetic_dataset(replace(dcfg, n_clips=n_heldout, seed=1))
    return [alignment_pair(s, base, train_clips, heldout_clips, n_samples) for s in seeds]


# ---------------------------------------------------------------- ablation grid

def ablation_configs(base: TrainConfig, depths: Sequence[int], placements=("spatial", "temporal"),
                     objectives=("diffusion", "flow")) -> list[TrainConfig]:
    out = []
    model = replace(base.model, time_scale=1.0)
    for obj, depth, place in itertools.product(objectives, depths, placements):
        out.append(replace(base, model=model, objective=obj, align_depth=depth, align_placement=place))
    return out


def run_ablation(base: TrainConfig, depths: Sequence[int], train_clips, heldout_clips,
                 out_dir=None, placements=("spatial", "temporal"), objectives=("diffusion", "flow")
                 ) -> list[dict]:
    rows = []
    for cfg in ablation_configs(base, depths, placements, objectives):
        res = train(cfg, train_clips)
        last = res.log[-1] if res.log else {"denoise": float("nan"), "align": float("nan"), "cosine": float("nan")}
        rows.append({
            "objective": cfg.objective,
            "align_depth": cfg.align_depth,
            "align_placement": cfg.align_placement,
            "final_denoise": last["denoise"],
            "final_align": last["align"],
            "final_cosine": last["cosine"],
            "heldout_denoise": heldout_denoise_loss(res.model, cfg, heldout_clips),
            "log_sha256": log_digest(res),
        })
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(ablation_csv(rows))
    return rows


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def default_ablation_base(steps: int = 60, seed: int = 0) -> TrainConfig:
    """Four block pairs so that depth N/3 and N/2 land on distinct blocks."""
    return TrainConfig(model=VDiTConfig(depth=4, hidden=32), steps=steps, seed=seed)


def ablation_depths(depth: int) -> list[int]:
    return sorted({max(depth // 3, 0), depth // 2})
