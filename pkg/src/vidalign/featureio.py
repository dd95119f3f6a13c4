"""Tensor files, synthetic video clips and deterministic stand-in encoders."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .tensor import Tensor

MAGIC = b"A4GT"
VERSION = 1
_HEADER = struct.Struct("<4sHH")
_MAX_ELEMENTS = 1 << 40

PathLike = Union[str, os.PathLike]


class TensorFileError(ValueError):
    pass


def _as_array(t) -> np.ndarray:
    if isinstance(t, Tensor):
        return t.data
    return np.asarray(t, dtype=np.float64)


def encode_tensor(t) -> bytes:
    arr = _as_array(t)
    if arr.ndim > 0xFFFF:
        raise TensorFileError("too many dimensions")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise TensorFileError("dimension exceeds u32")
    header = _HEADER.pack(MAGIC, VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise TensorFileError("truncated header")
    magic, version, ndim = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise TensorFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    off = _HEADER.size
    if len(buf) < off + 4 * ndim:
        raise TensorFileError("truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise TensorFileError("dims overflow")
    expected = off + 8 * count
    if len(buf) != expected:
        raise TensorFileError(f"payload length {len(buf) - off} != {8 * count}")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off)
    return arr.astype(np.float64).reshape(dims)


def write_tensor(path: PathLike, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_array(path: PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def read_tensor(path: PathLike) -> Tensor:
    return Tensor(read_array(path))


# ---------------------------------------------------------------- manifests

def write_manifest(path: PathLike, entries: list[dict]) -> None:
    Path(path).write_text(json.dumps(entries, indent=2) + "\n")


def read_manifest(path: PathLike) -> list[dict]:
    """Entries with paths resolved relative to the manifest's directory."""
    path = Path(path)
    entries = json.loads(path.read_text())
    if isinstance(entries, dict):
        entries = entries.get("clips", [])
    out = []
    for e in entries:
        e = dict(e)
        p = Path(e["path"])
        e["path"] = str(p if p.is_absolute() else path.parent / p)
        out.append(e)
    return out


def load_clip_dir(directory: PathLike) -> tuple[list[np.ndarray], list[int]]:
    entries = read_manifest(Path(directory) / "manifest.json")
    clips = [read_array(e["path"]) for e in entries]
    labels = [int(e.get("class_id", 0) or 0) for e in entries]
    return clips, labels


# ---------------------------------------------------------------- feature maps

@dataclass
class FeatureMap:
    """Patch features ``[frames, grid_h, grid_w, channels]``."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4:
            raise ValueError(f"FeatureMap needs 4 dims, got {self.values.shape}")
        t, h, w, _ = self.values.shape
        if t < 1 or h < 2 or w < 2:
            raise ValueError(f"FeatureMap too small: {self.values.shape}")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.values.shape[1], self.values.shape[2]

    @property
    def channels(self) -> int:
        return self.values.shape[3]

    def tokens(self) -> np.ndarray:
        """All patch tokens pooled across frames, ``[T*h*w, c]``."""
        return self.values.reshape(-1, self.channels)


# ---------------------------------------------------------------- synthetic data

MOTION_KINDS = ("static", "translate", "class")
# Class-conditional clips move in one of these (dy, dx) directions.
CLASS_DIRECTIONS = ((0, 1), (1, 0), (0, -1), (-1, 0))


@dataclass
class DatasetConfig:
    seed: int = 0
    n_clips: int = 32
    frames: int = 4
    height: int = 8
    width: int = 8
    channels: int = 4
    motion: str = "translate"
    speed: int = 1
    blob_sigma: float = 1.2
    background_amp: float = 0.15


def _blob_clip(rng: np.random.Generator, cfg: DatasetConfig, velocity: tuple[int, int]):
    T, H, W, C = cfg.frames, cfg.height, cfg.width, cfg.channels
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")

    # smooth background: one low-frequency plane wave per channel
    fy, fx = rng.integers(0, 2, size=2)
    phase = rng.uniform(0, 2 * np.pi, size=C)
    amp = cfg.background_amp * rng.uniform(0.5, 1.0, size=C)
    wave = 2 * np.pi * (fy * yy / H + fx * xx / W)
    background = amp * np.sin(wave[..., None] + phase)

    color = rng.uniform(0.5, 1.0, size=C)
    vy, vx = velocity
    span_y = abs(vy) * (T - 1)
    span_x = abs(vx) * (T - 1)
    margin = 1
    y0 = int(rng.integers(margin + (span_y if vy < 0 else 0), H - margin - (span_y if vy > 0 else 0)))
    x0 = int(rng.integers(margin + (span_x if vx < 0 else 0), W - margin - (span_x if vx > 0 else 0)))

    clip = np.empty((T, H, W, C))
    for t in range(T):
        cy, cx = y0 + vy * t, x0 + vx * t
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * cfg.blob_sigma**2))
        clip[t] = background + bump[..., None] * color
    return clip, (y0, x0)


def make_synthetic_dataset(cfg: DatasetConfig, return_centers: bool = False):
    """Clips of a translating Gaussian bump over a smooth background.

    Returns ``(clips, labels)``; labels are direction indices for the
    ``"class"`` motion kind and 0 otherwise.
    """
    if cfg.motion not in MOTION_KINDS:
        raise ValueError(f"unknown motion kind {cfg.motion!r}")
    if cfg.frames < 2:
        raise ValueError("frames must be >= 2")
    if cfg.n_clips < 0 or cfg.channels < 1:
        raise ValueError("degenerate dataset size")
    reach = cfg.speed * (cfg.frames - 1) + 3
    if cfg.height < reach or cfg.width < reach:
        raise ValueError(f"frame {cfg.height}x{cfg.width} too small for {cfg.frames} frames at speed {cfg.speed}")

    clips, labels, centers = [], [], []
    for i in range(cfg.n_clips):
        rng = np.random.default_rng([cfg.seed, i])
        if cfg.motion == "static":
            label, vel = 0, (0, 0)
        elif cfg.motion == "class":
            label = int(rng.integers(len(CLASS_DIRECTIONS)))
            dy, dx = CLASS_DIRECTIONS[label]
            vel = (dy * cfg.speed, dx * cfg.speed)
        else:
            label = 0
            dy, dx = CLASS_DIRECTIONS[int(rng.integers(len(CLASS_DIRECTIONS)))]
            vel = (dy * cfg.speed, dx * cfg.speed)
        clip, start = _blob_clip(rng, cfg, vel)
        clips.append(clip)
        labels.append(label)
        centers.append((start, vel))
    if return_centers:
        return clips, labels, centers
    return clips, labels


def write_dataset(out_dir: PathLike, clips: list[np.ndarray], labels: list[int]) -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (clip, label) in enumerate(zip(clips, labels)):
        name = f"clip_{i:05d}.a4gt"
        write_tensor(out_dir / name, clip)
        entries.append({"path": name, "class_id": int(label)})
    write_manifest(out_dir / "manifest.json", entries)
    return entries


# ---------------------------------------------------------------- oracle encoders

ENCODER_KINDS = ("lowpass", "highpass", "projection")


def _orthonormal(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    """``[n_in, n_out]`` matrix with orthonormal columns (or rows if n_out > n_in)."""
    big, small = max(n_in, n_out), min(n_in, n_out)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    q = q * np.sign(np.diag(r))
    return q if n_in >= n_out else q.T


@dataclass
class OracleEncoder:
    """Seeded frame-wise patch encoder with a known frequency bias.

    ``lowpass`` averages each patch, ``highpass`` takes a 4-neighbour
    Laplacian before flattening the patch, ``projection`` flattens raw
    patches. All three end in a fixed orthonormal projection plus bias.
    """

    kind: str = "lowpass"
    seed: int = 0
    out_channels: int = 8
    stride: int = 2
    bias_scale: float = 0.1

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def parameters(self, in_channels: int) -> tuple[np.ndarray, np.ndarray]:
        if in_channels not in self._cache:
            n_in = in_channels if self.kind == "lowpass" else in_channels * self.stride**2
            rng = np.random.default_rng([self.seed, ENCODER_KINDS.index(self.kind), n_in])
            proj = _orthonormal(rng, n_in, self.out_channels)
            bias = self.bias_scale * rng.standard_normal(self.out_channels)
            self._cache[in_channels] = (proj, bias)
        return self._cache[in_channels]

    def prefeatures(self, clip: np.ndarray) -> np.ndarray:
        """Patch descriptors before projection, ``[T, h, w, d]``."""
        clip = _as_array(clip)
        if clip.ndim != 4:
            raise ValueError(f"clip must be [T,H,W,C], got {clip.shape}")
        T, H, W, C = clip.shape
        s = self.stride
        if H % s or W % s:
            raise ValueError(f"clip {H}x{W} not divisible by encoder stride {s}")
        if self.kind == "highpass":
            pad = np.pad(clip, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
            clip = (4 * clip - pad[:, :-2, 1:-1] - pad[:, 2:, 1:-1]
                    - pad[:, 1:-1, :-2] - pad[:, 1:-1, 2:])
        patches = clip.reshape(T, H // s, s, W // s, s, C).transpose(0, 1, 3, 2, 4, 5)
        if self.kind == "lowpass":
            return patches.mean(axis=(3, 4))
        return patches.reshape(T, H // s, W // s, s * s * C)

    def __call__(self, clip) -> FeatureMap:
        return encode(self, clip)


def encode(enc: OracleEncoder, clip) -> FeatureMap:
    clip = _as_array(clip)
    proj, bias = enc.parameters(clip.shape[-1])
    return FeatureMap(enc.prefeatures(clip) @ proj + bias)


def encoder_from_dict(d: dict) -> OracleEncoder:
    return OracleEncoder(**d)
