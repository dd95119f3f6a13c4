"""Toy video diffusion transformer with factorised spatial/temporal attention.

Each depth holds one spatial block (attention inside a frame) followed by
one temporal block (attention across frames at a fixed patch position).
Both are pre-norm residual blocks modulated by AdaLN shift/scale/gate
vectors computed from the timestep (+ class) embedding.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .featureio import read_array, write_tensor
from .tensor import Tensor

PLACEMENTS = ("spatial", "temporal")
INIT_STD = 0.02


@dataclass
class VDiTConfig:
    depth: int = 4
    hidden: int = 64
    heads: int = 4
    patch: int = 2
    frames: int = 4
    height: int = 8
    width: int = 8
    in_channels: int = 4
    num_classes: int = 0
    freq_dim: int = 64
    mlp_ratio: int = 4
    # multiplies t before the sinusoidal embedding (flow models use t in [0, 1])
    time_scale: float = 1.0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"latent {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.freq_dim % 2:
            raise ValueError("freq_dim must be even")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.in_channels


def expected_param_count(cfg: VDiTConfig) -> int:
    """Trainable parameter count in closed form."""
    D, P = cfg.hidden, cfg.patch_dim
    M = cfg.mlp_ratio * D
    embed = P * D + D
    temb = cfg.freq_dim * D + D + D * D + D
    yemb = (cfg.num_classes + 1) * D if cfg.num_classes else 0
    block = (D * 6 * D + 6 * D) + (D * 3 * D + 3 * D) + (D * D + D) + (D * M + M) + (M * D + D)
    final = (D * 2 * D + 2 * D) + (D * P + P)
    return embed + temb + yemb + 2 * cfg.depth * block + final


# ---------------------------------------------------------------- patchify

def patchify(latent: Tensor, p: int) -> Tensor:
    """``[..., T, H, W, C]`` -> ``[..., T, (H/p)(W/p), p*p*C]``, row-major over the grid."""
    *lead, t, h, w, c = latent.shape
    if h % p or w % p:
        raise ValueError(f"{h}x{w} not divisible by patch {p}")
    nb = len(lead)
    x = T.reshape(latent, (*lead, t, h // p, p, w // p, p, c))
    perm = tuple(range(nb)) + tuple(nb + i for i in (0, 1, 3, 2, 4, 5))
    x = T.transpose(x, perm)
    return T.reshape(x, (*lead, t, (h // p) * (w // p), p * p * c))


def unpatchify(tokens: Tensor, p: int, h: int, w: int) -> Tensor:
    *lead, t, n, d = tokens.shape
    c = d // (p * p)
    if n != (h // p) * (w // p) or d != p * p * c:
        raise ValueError(f"tokens {tokens.shape} do not match {h}x{w} with patch {p}")
    nb = len(lead)
    x = T.reshape(tokens, (*lead, t, h // p, w // p, p, p, c))
    perm = tuple(range(nb)) + tuple(nb + i for i in (0, 1, 3, 2, 4, 5))
    x = T.transpose(x, perm)
    return T.reshape(x, (*lead, t, h, w, c))


# ---------------------------------------------------------------- embeddings

def timestep_frequencies(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def sincos_1d(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n, dtype=np.float64)
    half = dim // 2
    omega = 1.0 / 10000 ** (np.arange(half) / half)
    out = np.outer(pos, omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(gh: int, gw: int, dim: int) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    half = dim // 2
    ey = sincos_1d(gh, half)[ys.reshape(-1)]
    ex = sincos_1d(gw, half)[xs.reshape(-1)]
    return np.concatenate([ey, ex], axis=1)


def take_rows(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    src = table.shape

    def backward(g):
        full = np.zeros(src)
        np.add.at(full, ids, g)
        return (full,)

    return T._make(table.data[ids], (table,), backward, "take_rows")


# ---------------------------------------------------------------- init

def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) redrawn outside +-2 std."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def param_shapes(cfg: VDiTConfig) -> dict[str, tuple]:
    """Ordered name -> shape map; the order fixes the RNG draw order."""
    D, P = cfg.hidden, cfg.patch_dim
    M = cfg.mlp_ratio * D
    shapes: dict[str, tuple] = {
        "x_embed.w": (P, D), "x_embed.b": (D,),
        "t_embed.w1": (cfg.freq_dim, D), "t_embed.b1": (D,),
        "t_embed.w2": (D, D), "t_embed.b2": (D,),
    }
    if cfg.num_classes:
        shapes["y_embed.table"] = (cfg.num_classes + 1, D)
    for i in range(cfg.depth):
        for kind in PLACEMENTS:
            pre = f"blocks.{i}.{kind}."
            shapes.update({
                pre + "ada.w": (D, 6 * D), pre + "ada.b": (6 * D,),
                pre + "qkv.w": (D, 3 * D), pre + "qkv.b": (3 * D,),
                pre + "proj.w": (D, D), pre + "proj.b": (D,),
                pre + "fc1.w": (D, M), pre + "fc1.b": (M,),
                pre + "fc2.w": (M, D), pre + "fc2.b": (D,),
            })
    shapes.update({
        "final.ada.w": (D, 2 * D), "final.ada.b": (2 * D,),
        "final.w": (D, P), "final.b": (P,),
    })
    return shapes


def _zero_init(name: str) -> bool:
    return name.endswith(".b") or name.endswith(".b1") or name.endswith(".b2") \
        or ".ada." in name or name.startswith("final.")


class VDiT:
    """Parameters are leaf tensors in ``params``; positional tables are fixed buffers."""

    def __init__(self, config: VDiTConfig, params: dict[str, Tensor]):
        self.config = config
        expected = param_shapes(config)
        if set(params) != set(expected):
            missing = set(expected) ^ set(params)
            raise ValueError(f"parameter set mismatch: {sorted(missing)[:5]}")
        for k, shp in expected.items():
            if params[k].shape != shp:
                raise ValueError(f"{k}: shape {params[k].shape} != {shp}")
        self.params = {k: params[k] for k in expected}
        gh, gw = config.grid
        self.pos_spatial = sincos_2d(gh, gw, config.hidden)
        self.pos_temporal = sincos_1d(config.frames, config.hidden)

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "VDiT":
        model = VDiT(self.config, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})
        model.pos_temporal = self.pos_temporal
        model.pos_spatial = self.pos_spatial
        return model

    # ------------------------------------------------------------ forward

    def _cond(self, t, y, batch: int) -> Tensor:
        cfg, p = self.config, self.params
        t = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=np.float64)), (batch,))
        freqs = Tensor._wrap(timestep_frequencies(t * cfg.time_scale, cfg.freq_dim))
        c = T.linear(freqs, p["t_embed.w1"], p["t_embed.b1"])
        c = T.linear(T.silu(c), p["t_embed.w2"], p["t_embed.b2"])
        if cfg.num_classes:
            if y is None:
                ids = np.full(batch, cfg.num_classes)  # null class row
            else:
                ids = np.broadcast_to(np.atleast_1d(np.asarray(y, dtype=np.int64)), (batch,))
                if (ids < 0).any() or (ids > cfg.num_classes).any():
                    raise ValueError(f"class id out of range: {ids}")
            c = T.add(c, take_rows(p["y_embed.table"], ids))
        return T.silu(c)

    def _block(self, prefix: str, x: Tensor, cond: Tensor) -> Tensor:
        """Pre-norm AdaLN block on ``x [N, S, D]`` with per-sequence ``cond [N, D]``."""
        p = self.params
        N, S, D = x.shape
        H = self.config.heads
        mod = T.linear(cond, p[prefix + "ada.w"], p[prefix + "ada.b"])

        def chunk(i):
            part = T.index(mod, (slice(None), slice(i * D, (i + 1) * D)))
            return T.broadcast_to(T.reshape(part, (N, 1, D)), (N, S, D))

        shift1, scale1, gate1, shift2, scale2, gate2 = (chunk(i) for i in range(6))

        h = T.add(T.mul(T.layernorm(x), T.add(scale1, 1.0)), shift1)
        qkv = T.linear(h, p[prefix + "qkv.w"], p[prefix + "qkv.b"])
        qkv = T.transpose(T.reshape(qkv, (N, S, 3, H, D // H)), (2, 0, 3, 1, 4))
        att = T.softmax_attention(T.index(qkv, 0), T.index(qkv, 1), T.index(qkv, 2))
        att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (N, S, D))
        att = T.linear(att, p[prefix + "proj.w"], p[prefix + "proj.b"])
        x = T.add(x, T.mul(gate1, att))

        h = T.add(T.mul(T.layernorm(x), T.add(scale2, 1.0)), shift2)
        h = T.gelu(T.linear(h, p[prefix + "fc1.w"], p[prefix + "fc1.b"]))
        h = T.linear(h, p[prefix + "fc2.w"], p[prefix + "fc2.b"])
        return T.add(x, T.mul(gate2, h))

    def forward(self, x, t, y=None) -> tuple[Tensor, dict]:
        """Predict noise/velocity for ``x [B, T, H, W, C]`` (or unbatched ``[T, H, W, C]``).

        ``hidden[(i, "spatial")]`` / ``hidden[(i, "temporal")]`` hold the
        ``[B, T, P, D]`` tokens after each block at depth ``i``.
        """
        cfg, p = self.config, self.params
        x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))
        unbatched = x.ndim == 4
        if unbatched:
            x = T.reshape(x, (1,) + x.shape)
        B, F, Hh, W, C = x.shape
        if (Hh, W, C) != (cfg.height, cfg.width, cfg.in_channels):
            raise ValueError(f"latent {x.shape[2:]} does not match config")
        if F != len(self.pos_temporal):
            raise ValueError(f"{F} frames but model built for {len(self.pos_temporal)}")
        P, D = cfg.num_patches, cfg.hidden

        h = T.linear(patchify(x, cfg.patch), p["x_embed.w"], p["x_embed.b"])
        h = T.add(h, T.broadcast_to(Tensor._wrap(self.pos_spatial), (B, F, P, D)))
        cond = self._cond(t, y, B)
        cond_frames = T.reshape(T.broadcast_to(T.reshape(cond, (B, 1, D)), (B, F, D)), (B * F, D))
        cond_pos = T.reshape(T.broadcast_to(T.reshape(cond, (B, 1, D)), (B, P, D)), (B * P, D))
        temporal_pos = T.broadcast_to(Tensor._wrap(self.pos_temporal.reshape(F, 1, D)), (B, F, P, D))

        hidden = {}
        for i in range(cfg.depth):
            h = T.reshape(self._block(f"blocks.{i}.spatial.", T.reshape(h, (B * F, P, D)), cond_frames),
                          (B, F, P, D))
            if i == 0:
                h = T.add(h, temporal_pos)
            hidden[(i, "spatial")] = h
            ht = T.reshape(T.transpose(h, (0, 2, 1, 3)), (B * P, F, D))
            ht = self._block(f"blocks.{i}.temporal.", ht, cond_pos)
            h = T.transpose(T.reshape(ht, (B, P, F, D)), (0, 2, 1, 3))
            hidden[(i, "temporal")] = h

        mod = T.linear(cond, p["final.ada.w"], p["final.ada.b"])
        shift = T.broadcast_to(T.reshape(T.index(mod, (slice(None), slice(0, D))), (B, 1, 1, D)), (B, F, P, D))
        scl = T.broadcast_to(T.reshape(T.index(mod, (slice(None), slice(D, 2 * D))), (B, 1, 1, D)), (B, F, P, D))
        h = T.add(T.mul(T.layernorm(h), T.add(scl, 1.0)), shift)
        out = T.linear(h, p["final.w"], p["final.b"])
        out = unpatchify(out, cfg.patch, cfg.height, cfg.width)
        if unbatched:
            out = T.reshape(out, out.shape[1:])
        return out, hidden

    def __call__(self, x, t, y=None):
        return self.forward(x, t, y)

    def predict(self, x, t, y=None) -> np.ndarray:
        """Forward pass without recording gradients."""
        with _no_tape():
            out, _ = self.forward(np.asarray(x, dtype=np.float64), t, y)
        return out.data


class _no_tape:
    def __enter__(self):
        self._token = T._active_tape.set(None)

    def __exit__(self, *exc):
        T._active_tape.reset(self._token)


def init_params(config: VDiTConfig, seed: int = 0) -> VDiT:
    """Truncated-normal weights; AdaLN modulation and the output layer start at zero."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if _zero_init(name):
            arr = np.zeros(shape)
        else:
            arr = trunc_normal(rng, shape)
        params[name] = Tensor(arr, requires_grad=True)
    return VDiT(config, params)


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: VDiT
    extra: dict = field(default_factory=dict)
    optimizer: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    head: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def _fname(name: str) -> str:
    return name + ".a4gt"


def save_checkpoint(directory, ckpt: Checkpoint) -> Path:
    """One TensorFile per named array plus ``header.json``."""
    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    header = {
        "format": "vidalign-checkpoint",
        "version": 1,
        "step": ckpt.step,
        "config": asdict(ckpt.model.config),
        "params": {},
        "head": {},
        "optimizer": {},
        "extra": ckpt.extra,
    }
    for name, arr in ckpt.model.arrays().items():
        rel = f"params/{_fname(name)}"
        write_tensor(d / rel, arr)
        header["params"][name] = rel
    if ckpt.head:
        (d / "head").mkdir(exist_ok=True)
        for name, arr in ckpt.head.items():
            rel = f"head/{_fname(name)}"
            write_tensor(d / rel, arr)
            header["head"][name] = rel
    for slot, arrays in ckpt.optimizer.items():
        (d / "optim" / slot).mkdir(parents=True, exist_ok=True)
        header["optimizer"][slot] = {}
        for name, arr in arrays.items():
            rel = f"optim/{slot}/{_fname(name)}"
            write_tensor(d / rel, np.asarray(arr, dtype=np.float64))
            header["optimizer"][slot][name] = rel
    (d / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    if d.is_file():
        d = d.parent
    header = json.loads((d / "header.json").read_text())
    cfg = VDiTConfig(**header["config"])
    params = {k: Tensor(read_array(d / rel), requires_grad=True) for k, rel in header["params"].items()}
    head = {k: read_array(d / rel) for k, rel in header.get("head", {}).items()}
    optim = {slot: {k: read_array(d / rel) for k, rel in arrays.items()}
             for slot, arrays in header.get("optimizer", {}).items()}
    return Checkpoint(model=VDiT(cfg, params), extra=header.get("extra", {}),
                      optimizer=optim, head=head, step=int(header.get("step", 0)))
