"""Denoising objectives, encoder-feature alignment and the training loop."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .featureio import FeatureMap, OracleEncoder, encode
from .tensor import NonFiniteError, Tape, Tensor
from .vdit import PLACEMENTS, Checkpoint, VDiT, VDiTConfig, init_params, save_checkpoint

logger = logging.getLogger(__name__)

OBJECTIVES = ("diffusion", "flow")
LOG_HEADER = ("step", "denoise", "align", "total", "cosine")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


# ---------------------------------------------------------------- schedule

@dataclass
class NoiseSchedule:
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    steps: int = 1000

    def __post_init__(self):
        if self.kind != "linear":
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.steps < 1:
            raise ValueError("schedule needs at least one step")
        self.betas = np.linspace(self.beta_start, self.beta_end, self.steps)
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("betas must lie in (0, 1)")
        # index 0 is the clean end: alpha_bar_0 = 1
        self.alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.steps) or np.any(t != np.round(t)):
            raise ValueError(f"timestep out of range [0, {self.steps}]: {t}")
        return self.alpha_bars[t.astype(np.int64)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "steps": self.steps}


def _per_sample(v, x: np.ndarray) -> np.ndarray:
    """Reshape a scalar or ``[B]`` vector to broadcast over ``x``'s trailing dims."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        return v
    return v.reshape(v.shape + (1,) * (x.ndim - v.ndim))


def diffuse(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward marginal ``sqrt(ab) x0 + sqrt(1 - ab) eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {x0.shape}")
    ab = _per_sample(schedule.alpha_bar(t), x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def flow_interpolate(x0, eps, t) -> tuple[np.ndarray, np.ndarray]:
    """Straight path from noise (t=0) to data (t=1) and its constant velocity."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {x0.shape}")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError(f"flow time must lie in [0, 1]: {t}")
    tt = _per_sample(t_arr, x0)
    return (1.0 - tt) * eps + tt * x0, x0 - eps


def _predict(model, x, t, y):
    """Call a VDiT or any callable returning a prediction (optionally with hidden states)."""
    out = model.forward(x, t, y) if hasattr(model, "forward") else model(x, t, y)
    if isinstance(out, tuple):
        pred, hidden = out
    else:
        pred, hidden = out, {}
    if not isinstance(pred, Tensor):
        pred = Tensor._wrap(np.asarray(pred, dtype=np.float64))
    return pred, hidden


def diffusion_loss(model, x0, t, eps, schedule: NoiseSchedule, y=None, return_hidden: bool = False):
    """MSE between the injected noise and the model's noise prediction."""
    xt = diffuse(x0, t, eps, schedule)
    pred, hidden = _predict(model, xt, t, y)
    loss = T.mse(pred, Tensor._wrap(np.asarray(eps, dtype=np.float64)))
    return (loss, hidden) if return_hidden else loss


def flow_loss(model, x0, eps, t, y=None, return_hidden: bool = False):
    """MSE between ``x0 - eps`` and the model's velocity at the interpolant."""
    xt, target = flow_interpolate(x0, eps, t)
    pred, hidden = _predict(model, xt, t, y)
    loss = T.mse(pred, Tensor._wrap(target))
    return (loss, hidden) if return_hidden else loss


# ---------------------------------------------------------------- fusion / alignment

def fuse_features(maps: Sequence[FeatureMap]) -> FeatureMap:
    """Unit-normalize each map's per-token vectors, then concatenate channels."""
    if not maps:
        raise ValueError("no feature maps to fuse")
    lead = maps[0].values.shape[:3]
    parts = []
    for m in maps:
        if m.values.shape[:3] != lead:
            raise ValueError(f"feature grids differ: {m.values.shape[:3]} vs {lead}")
        n = np.linalg.norm(m.values, axis=-1, keepdims=True)
        if (n == 0).any():
            raise ValueError("zero-norm feature token")
        parts.append(m.values / n)
    return FeatureMap(np.concatenate(parts, axis=-1))


@dataclass
class AlignmentHead:
    """Shared token-wise MLP ``D -> W -> W -> F`` with GELU, ``W = width_mult * F``."""

    params: dict[str, Tensor]

    @classmethod
    def create(cls, in_dim: int, target_dim: int, seed: int = 0, width_mult: int = 2) -> "AlignmentHead":
        rng = np.random.default_rng([seed, 0xA11])
        width = width_mult * target_dim
        dims = [(in_dim, width), (width, width), (width, target_dim)]
        params = {}
        for i, (a, b) in enumerate(dims, start=1):
            params[f"w{i}"] = Tensor(rng.standard_normal((a, b)) / math.sqrt(a), requires_grad=True)
            params[f"b{i}"] = Tensor(np.zeros(b), requires_grad=True)
        return cls(params)

    def __call__(self, q: Tensor) -> Tensor:
        p = self.params
        h = T.gelu(T.linear(q, p["w1"], p["b1"]))
        h = T.gelu(T.linear(h, p["w2"], p["b2"]))
        return T.linear(h, p["w3"], p["b3"])

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AlignmentHead":
        return cls({k: Tensor(v, requires_grad=True) for k, v in arrays.items()})


def alignment_loss(hidden: Tensor, head: AlignmentHead, fused, distance: str = "cosine"):
    """Mean over tokens of ``1 - cos(head(q_i), p_i)``; returns ``(loss, mean_cosine)``.

    ``hidden`` is ``[B, T, P, D]`` (or ``[T, P, D]``); ``fused`` is the target
    grid ``[B, T, h, w, F]`` (or ``[T, h, w, F]``) with ``h * w == P``.
    """
    target = fused.values if isinstance(fused, FeatureMap) else np.asarray(fused, dtype=np.float64)
    if hidden.ndim == 3:
        hidden = T.reshape(hidden, (1,) + hidden.shape)
        target = target[None]
    B, F, P, _ = hidden.shape
    if target.shape[:2] != (B, F) or target.shape[2] * target.shape[3] != P:
        raise ValueError(f"token grid {hidden.shape[:3]} does not match feature grid {target.shape[:4]}")
    target = Tensor._wrap(target.reshape(B, F, P, -1))
    proj = head(hidden)
    if np.any(np.linalg.norm(proj.data, axis=-1) == 0):
        raise ValueError("zero-norm projected token")
    cos = T.cosine_similarity(proj, target, axis=-1)
    mean_cos = float(cos.data.mean())
    if distance == "cosine":
        loss = T.sub(1.0, T.reduce("mean", cos))
    elif distance == "l2":
        d = T.sub(proj, target)
        loss = T.reduce("mean", T.reduce("sum", T.mul(d, d), axis=-1))
    else:
        raise ValueError(f"unknown alignment distance {distance!r}")
    return loss, mean_cos


def total_loss(denoise: Tensor, align: Tensor, gamma: float) -> Tensor:
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return T.add(denoise, T.scale(align, gamma))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_slots(self) -> dict[str, dict[str, np.ndarray]]:
        return {"m": self.m, "v": self.v, "meta": {"step": np.array(float(self.step))}}

    @classmethod
    def from_slots(cls, slots: dict) -> "AdamState":
        if not slots:
            return cls()
        return cls(step=int(slots["meta"]["step"]), m=dict(slots["m"]), v=dict(slots["v"]))


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              ) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam; returns new arrays and a new state (inputs untouched)."""
    step = state.step + 1
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = beta1 * state.m.get(name, 0.0) + (1 - beta1) * g
        v = beta2 * state.v.get(name, 0.0) + (1 - beta2) * g * g
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_out[name] = np.asarray(m, dtype=np.float64)
        v_out[name] = np.asarray(v, dtype=np.float64)
    return new_params, AdamState(step, m_out, v_out)


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    objective: str = "flow"
    gamma: float = 0.5
    align_depth: Optional[int] = None       # None -> depth // 2
    align_placement: str = "spatial"
    align_distance: str = "cosine"
    head_width_mult: int = 2
    batch_size: int = 8
    steps: int = 500
    lr: float = 1e-3
    seed: int = 0
    init_seed: Optional[int] = None         # model init; defaults to seed
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    encoders: list[OracleEncoder] = field(default_factory=lambda: [
        OracleEncoder("lowpass", seed=1, out_channels=8),
        OracleEncoder("highpass", seed=2, out_channels=8),
    ])
    model: VDiTConfig = field(default_factory=lambda: VDiTConfig(depth=2, hidden=32))
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.align_placement not in PLACEMENTS:
            raise ValueError(f"align_placement must be one of {PLACEMENTS}")
        if self.align_depth is None:
            self.align_depth = self.model.depth // 2
        if not 0 <= self.align_depth < self.model.depth:
            raise ValueError(f"align_depth {self.align_depth} outside [0, {self.model.depth})")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.objective == "flow" and self.model.time_scale == 1.0:
            self.model = VDiTConfig(**{**asdict(self.model), "time_scale": 1000.0})

    @property
    def align_enabled(self) -> bool:
        return bool(self.encoders)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["schedule"] = self.schedule.to_dict()
        d["encoders"] = [asdict(e) for e in self.encoders]
        d["model"] = asdict(self.model)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        if "schedule" in d:
            d["schedule"] = NoiseSchedule(**d["schedule"])
        if "encoders" in d:
            d["encoders"] = [OracleEncoder(**e) for e in d["encoders"]]
        if "model" in d:
            d["model"] = VDiTConfig(**d["model"])
        return cls(**d)


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    model: VDiT
    head: Optional[AlignmentHead]
    log: list[dict]
    optimizer: AdamState
    config: TrainConfig

    def checkpoint(self) -> Checkpoint:
        extra = {"objective": self.config.objective, "schedule": self.config.schedule.to_dict(),
                 "train_config": self.config.to_dict()}
        return Checkpoint(model=self.model, extra=extra, optimizer=self.optimizer.to_slots(),
                          head=self.head.arrays() if self.head else {}, step=self.optimizer.step)


def fused_targets(clips: Sequence[np.ndarray], encoders: Sequence[OracleEncoder]) -> np.ndarray:
    """Fused encoder features of every clean clip, ``[N, T, h, w, F]``."""
    return np.stack([fuse_features([encode(e, c) for e in encoders]).values for c in clips])


def log_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_HEADER)
    for r in rows:
        w.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_HEADER[1:]])
    return buf.getvalue()


def _draw(config: TrainConfig, rng: np.random.Generator, x0: np.ndarray):
    B = len(x0)
    if config.objective == "diffusion":
        t = rng.integers(1, config.schedule.steps + 1, size=B)
    else:
        t = rng.uniform(0.0, 1.0, size=B)
    eps = rng.standard_normal(x0.shape)
    return t, eps


def train_step_loss(model: VDiT, head: Optional[AlignmentHead], config: TrainConfig, x0, y, t, eps,
                    targets=None):
    """Build the step's losses on the active tape; returns ``(total, denoise, align, cosine)``."""
    if config.objective == "diffusion":
        denoise, hidden = diffusion_loss(model, x0, t, eps, config.schedule, y, return_hidden=True)
    else:
        denoise, hidden = flow_loss(model, x0, eps, t, y, return_hidden=True)
    if head is None or targets is None:
        return denoise, denoise, None, math.nan
    q = hidden[(config.align_depth, config.align_placement)]
    align, cos = alignment_loss(q, head, targets, config.align_distance)
    return total_loss(denoise, align, config.gamma), denoise, align, cos


def train(config: TrainConfig, clips: Sequence[np.ndarray], labels: Optional[Sequence[int]] = None,
          out_dir=None, on_step: Optional[Callable[[dict], None]] = None,
          model: Optional[VDiT] = None) -> TrainResult:
    """Run the alignment-regularised training loop; deterministic given ``config.seed``."""
    if len(clips) == 0:
        raise ValueError("empty dataset")
    data = np.stack([np.asarray(c, dtype=np.float64) for c in clips])
    mcfg = config.model
    if data.shape[1:] != (mcfg.frames, mcfg.height, mcfg.width, mcfg.in_channels):
        raise ValueError(f"clip shape {data.shape[1:]} does not match model config")
    labels_arr = np.asarray(labels if labels is not None else np.zeros(len(data)), dtype=np.int64)

    init_seed = config.seed if config.init_seed is None else config.init_seed
    model = model or init_params(mcfg, init_seed)
    head = None
    targets = None
    if config.align_enabled:
        targets = fused_targets(data, config.encoders)
        if targets.shape[2] * targets.shape[3] != mcfg.num_patches or targets.shape[2:4] != mcfg.grid:
            raise ValueError(f"encoder grid {targets.shape[2:4]} != token grid {mcfg.grid}")
        head = AlignmentHead.create(mcfg.hidden, targets.shape[-1], seed=init_seed,
                                    width_mult=config.head_width_mult)

    rng = np.random.default_rng([config.seed, 0x7EA1])
    state = AdamState()
    rows = []
    out_path = Path(out_dir) if out_dir is not None else None
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, len(data), size=config.batch_size)
        x0 = data[idx]
        y = labels_arr[idx] if mcfg.num_classes else None
        t, eps = _draw(config, rng, x0)
        try:
            # overflow surfaces as NonFiniteError below; no need for numpy's warnings too
            with Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
                total, denoise, align, cos = train_step_loss(
                    model, head, config, x0, y, t, eps, None if targets is None else targets[idx])
            with np.errstate(over="ignore", invalid="ignore"):
                tape.backward(total)
        except NonFiniteError as exc:
            raise DivergenceError(f"diverged at step {step}: {exc}") from exc

        arrays = {k: p.data for k, p in model.params.items()}
        grads = {k: p.grad for k, p in model.params.items()}
        if head is not None:
            arrays.update({"head." + k: p.data for k, p in head.params.items()})
            grads.update({"head." + k: p.grad if p.grad is not None else np.zeros_like(p.data)
                          for k, p in head.params.items()})
        with np.errstate(over="ignore", invalid="ignore"):
            new, state = adam_step(arrays, grads, state, config.lr)
        if not all(np.isfinite(a).all() for a in new.values()):
            raise DivergenceError(f"diverged at step {step}: non-finite parameters")
        model = model.with_arrays({k: new[k] for k in model.params})
        if head is not None:
            head = AlignmentHead.from_arrays({k: new["head." + k] for k in head.params})

        row = {"step": step, "denoise": denoise.item(),
               "align": align.item() if align is not None else math.nan,
               "total": total.item(), "cosine": cos}
        rows.append(row)
        if on_step:
            on_step(row)
        if out_path is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            res = TrainResult(model, head, rows, state, config)
            save_checkpoint(out_path / f"ckpt_{step:06d}", res.checkpoint())
        if step % 100 == 0:
            logger.info("step %d total=%.4f cos=%.3f", step, row["total"], cos)

    result = TrainResult(model, head, rows, state, config)
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "train_log.csv").write_text(log_to_csv(rows))
        (out_path / "train_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
        save_checkpoint(out_path / "ckpt_final", result.checkpoint())
    return result


def heldout_denoise_loss(model: VDiT, config: TrainConfig, clips, labels=None, seed: int = 12345,
                         repeats: int = 4) -> float:
    """Mean denoising loss on fixed (t, noise) draws; identical draws for every model."""
    data = np.stack([np.asarray(c, dtype=np.float64) for c in clips])
    labels_arr = np.asarray(labels if labels is not None else np.zeros(len(data)), dtype=np.int64)
    rng = np.random.default_rng([seed, 0xE7A1])
    total = 0.0
    for _ in range(repeats):
        t, eps = _draw(config, rng, data)
        y = labels_arr if config.model.num_classes else None
        if config.objective == "diffusion":
            target = eps
            xt = diffuse(data, t, eps, config.schedule)
        else:
            xt, target = flow_interpolate(data, eps, t)
        pred = model.predict(xt, t, y)
        total += float(np.mean((pred - target) ** 2))
    return total / repeats
