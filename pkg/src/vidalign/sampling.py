"""Euler (flow) and DDIM (diffusion) samplers, plus batch generation to disk."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .featureio import write_manifest, write_tensor
from .training import NoiseSchedule
from .vdit import load_checkpoint

SAMPLERS = ("ddim", "euler")

# predict(z [B, ...], t [B], y) -> array like z
Predictor = Callable[[np.ndarray, np.ndarray, Optional[np.ndarray]], np.ndarray]


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    kind: str = "euler"
    steps: int = 50
    seed: int = 0
    eta: float = 0.0
    batch: int = 16

    def __post_init__(self):
        if self.kind not in SAMPLERS:
            raise ValueError(f"sampler kind must be one of {SAMPLERS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")


def _as_predictor(model) -> Predictor:
    return model.predict if hasattr(model, "predict") else model


def _tvec(t: float, z: np.ndarray) -> np.ndarray:
    return np.full(len(z), t, dtype=np.float64)


def euler_sample(model, z, steps: int, y=None) -> np.ndarray:
    """Integrate the velocity field from noise (t=0) to data (t=1) in ``steps`` equal steps.

    ``z`` is batched ``[B, ...]``. The loop counts remaining steps down, but
    the time fed to the model runs forward on the grid ``k / steps``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    predict = _as_predictor(model)
    z = np.array(z, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        v = np.asarray(predict(z, _tvec(k * dt, z), y), dtype=np.float64)
        z = z + v * dt
        if not np.isfinite(z).all():
            raise SamplingError(f"non-finite state at Euler step {k}")
    return z


def ddim_timesteps(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    """Descending grid from ``schedule.steps`` to 0 with ``steps`` uniform strides."""
    if steps > schedule.steps:
        raise ValueError(f"{steps} sampling steps exceed {schedule.steps} schedule steps")
    return np.rint(np.linspace(schedule.steps, 0, steps + 1)).astype(np.int64)


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t_prev]
    return float(eta * np.sqrt((1 - ab_prev) / (1 - ab)) * np.sqrt(1 - ab / ab_prev))


def ddim_sample(model, z, schedule: NoiseSchedule, steps: int, eta: float = 0.0, y=None,
                rngs: Optional[Sequence[np.random.Generator]] = None, start_t: Optional[int] = None
                ) -> np.ndarray:
    """DDIM over a uniform-stride timestep subsequence.

    ``rngs`` supplies one generator per batch row for the ``eta > 0`` noise.
    ``start_t`` overrides the first timestep (defaults to ``schedule.steps``).
    """
    predict = _as_predictor(model)
    x = np.array(z, dtype=np.float64)
    grid = ddim_timesteps(schedule, steps)
    if start_t is not None:
        grid = np.rint(np.linspace(start_t, 0, steps + 1)).astype(np.int64)
    if eta > 0 and rngs is None:
        raise ValueError("eta > 0 needs per-sample generators")
    for t, t_prev in zip(grid[:-1], grid[1:]):
        ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t_prev]
        eps = np.asarray(predict(x, _tvec(t, x), y), dtype=np.float64)
        x0_hat = (x - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
        sigma = ddim_sigma(schedule, t, t_prev, eta)
        x = np.sqrt(ab_prev) * x0_hat + np.sqrt(max(1 - ab_prev - sigma**2, 0.0)) * eps
        if sigma > 0:
            noise = np.stack([r.standard_normal(x.shape[1:]) for r in rngs])
            x = x + sigma * noise
        if not np.isfinite(x).all():
            raise SamplingError(f"non-finite state at DDIM step t={t}")
    return x


def generate_batch(checkpoint, sampler: SamplerConfig, n: int, out_dir=None,
                   classes: Optional[Sequence[int]] = None) -> tuple[list[np.ndarray], list[dict]]:
    """Sample ``n`` clips; noise for sample ``i`` comes from ``default_rng([seed, i])``.

    With ``out_dir`` set, clips are written as TensorFiles plus ``manifest.json``.
    """
    ckpt = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    model = ckpt.model
    cfg = model.config
    shape = (cfg.frames, cfg.height, cfg.width, cfg.in_channels)
    if classes is not None and len(classes) != n:
        raise ValueError(f"{len(classes)} class ids for {n} samples")
    if classes is not None and cfg.num_classes:
        bad = [c for c in classes if not 0 <= int(c) < cfg.num_classes]
        if bad:
            raise ValueError(f"class ids out of range: {bad[:5]}")
    objective = ckpt.extra.get("objective")
    expected = {"flow": "euler", "diffusion": "ddim"}.get(objective)
    if expected and expected != sampler.kind:
        raise ValueError(f"{sampler.kind} sampler does not fit a {objective}-trained checkpoint")
    schedule = NoiseSchedule(**ckpt.extra.get("schedule", {}))

    clips: list[np.ndarray] = []
    for lo in range(0, n, sampler.batch):
        ids = range(lo, min(n, lo + sampler.batch))
        rngs = [np.random.default_rng([sampler.seed, i]) for i in ids]
        z = np.stack([r.standard_normal(shape) for r in rngs])
        y = None
        if cfg.num_classes and classes is not None:
            y = np.asarray([classes[i] for i in ids], dtype=np.int64)
        if sampler.kind == "euler":
            out = euler_sample(model, z, sampler.steps, y)
        else:
            out = ddim_sample(model, z, schedule, sampler.steps, sampler.eta, y, rngs)
        clips.extend(out)

    entries = []
    for i, clip in enumerate(clips):
        cid = int(classes[i]) if classes is not None else None
        entries.append({"path": f"sample_{i:05d}.a4gt", "class_id": cid, "seed_index": i})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for e, clip in zip(entries, clips):
            write_tensor(out / e["path"], clip)
        write_manifest(out / "manifest.json", entries)
    return clips, entries
