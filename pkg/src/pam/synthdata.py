"""Deterministic synthetic matting composites.

Every sample is a pure function of ``(seed, split, index, config)``: soft-edged
foreground shapes over a smooth, noisy background, composited exactly as
``image = alpha * fg + (1 - alpha) * bg`` in float32.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.ndimage
import torch
from scipy.special import ndtr

SPLITS = {"train": 0, "eval": 1, "prior": 2}

_TAIL = ndtr(-3.0)


@dataclass(frozen=True)
class DataConfig:
    resolution: int = 64
    max_shapes: int = 3
    feather: tuple[float, float] = (0.6, 2.0)  # gaussian sigma of the alpha edge, pixels
    erode_radius: int = 3
    dilate_radius: int = 3
    augment: bool = True
    brightness: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "feather", tuple(self.feather))
        if self.resolution < 16 or self.resolution % 16:
            raise ValueError(f"resolution must be a positive multiple of 16, got {self.resolution}")
        if self.erode_radius < 1 or self.dilate_radius < 1:
            raise ValueError("trimap radii must be at least 1")


@dataclass
class MattingSample:
    image: np.ndarray  # (3, H, W)
    trimap: np.ndarray  # (H, W) in {0, 0.5, 1}
    alpha: np.ndarray  # (H, W)
    fg: np.ndarray  # (3, H, W)
    bg: np.ndarray  # (3, H, W)
    sample_id: str = ""


def composite(alpha: np.ndarray, fg: np.ndarray, bg: np.ndarray) -> np.ndarray:
    a = alpha[None].astype(np.float32)
    return (a * fg + (np.float32(1) - a) * bg).astype(np.float32)


def _feathered(signed_dist: np.ndarray, sigma: float) -> np.ndarray:
    # truncated gaussian CDF: exactly 0 / 1 beyond three sigma
    ramp = (ndtr(signed_dist / sigma) - _TAIL) / (1.0 - 2.0 * _TAIL)
    return np.clip(ramp, 0.0, 1.0)


def _shape_distance(kind: str, rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray, res: int) -> np.ndarray:
    cy, cx = rng.uniform(0.3, 0.7, size=2) * res
    radius = rng.uniform(0.1, 0.22) * res
    if kind == "disk":
        return radius - np.hypot(yy - cy, xx - cx)
    if kind == "capsule":
        theta = rng.uniform(0, np.pi)
        half = rng.uniform(0.1, 0.25) * res
        radius *= 0.6
        dy, dx = np.sin(theta) * half, np.cos(theta) * half
        py, px = yy - (cy - dy), xx - (cx - dx)
        t = np.clip((py * 2 * dy + px * 2 * dx) / (4 * (dy * dy + dx * dx)), 0.0, 1.0)
        return radius - np.hypot(py - t * 2 * dy, px - t * 2 * dx)
    # fractal blob: radius modulated by harmonics with 1/k amplitudes
    rho = np.hypot(yy - cy, xx - cx)
    phi = np.arctan2(yy - cy, xx - cx)
    boundary = np.ones_like(rho)
    for k in range(2, 9):
        boundary += rng.uniform(0.0, 0.35) / k * np.sin(k * phi + rng.uniform(0, 2 * np.pi))
    return radius * boundary - rho


def _smooth_field(rng: np.random.Generator, res: int, amplitude: float) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res] / res
    out = np.empty((3, res, res))
    base = rng.uniform(0.1, 0.9, size=3)
    tilt = rng.uniform(-0.3, 0.3, size=(3, 2))
    sigma = rng.uniform(1.5, 5.0)
    for c in range(3):
        noise = scipy.ndimage.gaussian_filter(rng.standard_normal((res, res)), sigma, mode="wrap")
        noise /= noise.std() + 1e-12
        out[c] = base[c] + tilt[c, 0] * (yy - 0.5) + tilt[c, 1] * (xx - 0.5) + amplitude * noise
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _disk(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    return np.hypot(r[:, None], r[None, :]) <= radius


def make_trimap(alpha: np.ndarray, erode_radius: int, dilate_radius: int, rng: np.random.Generator | None = None):
    """Trimap from a ground-truth alpha.

    Known foreground is ``{alpha == 1}`` eroded by ``erode_radius``; known
    background is ``{alpha == 0}`` eroded by ``dilate_radius`` (i.e. the
    nonzero region dilated). With ``rng`` each radius is drawn uniformly from
    ``[1, radius]``.
    """
    if erode_radius < 1 or dilate_radius < 1:
        raise ValueError("trimap radii must be at least 1")
    if rng is not None:
        erode_radius = int(rng.integers(1, erode_radius + 1))
        dilate_radius = int(rng.integers(1, dilate_radius + 1))
    fg = scipy.ndimage.binary_erosion(alpha == 1, _disk(erode_radius), border_value=1)
    bg = scipy.ndimage.binary_erosion(alpha == 0, _disk(dilate_radius), border_value=1)
    trimap = np.full(alpha.shape, 0.5, dtype=np.float32)
    trimap[fg] = 1.0
    trimap[bg] = 0.0
    if ((alpha == 0) | (alpha == 1)).any() and not (fg | bg).any():
        raise ValueError(
            f"trimap is entirely unknown at radii erode={erode_radius}, dilate={dilate_radius}; "
            "reduce the radii"
        )
    return trimap


def generate_sample(seed: int, index: int, config: DataConfig = DataConfig(), split: str = "train") -> MattingSample:
    res = config.resolution
    rng = np.random.default_rng([seed, SPLITS[split], index])
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    keep_out = np.ones((res, res))
    for _ in range(int(rng.integers(1, config.max_shapes + 1))):
        kind = ("disk", "capsule", "blob")[int(rng.integers(0, 3))]
        dist = _shape_distance(kind, rng, yy, xx, res)
        keep_out *= 1.0 - _feathered(dist, rng.uniform(*config.feather))
    alpha = (1.0 - keep_out).astype(np.float32)
    fg = _smooth_field(rng, res, amplitude=0.08)
    bg = _smooth_field(rng, res, amplitude=0.15)
    trimap = make_trimap(alpha, config.erode_radius, config.dilate_radius, rng)
    return MattingSample(composite(alpha, fg, bg), trimap, alpha, fg, bg, f"{split}-{seed}-{index}")


@dataclass(frozen=True)
class AugmentDraw:
    flip: bool = False
    rotations: int = 0
    brightness: float = 0.0


def draw_augment(rng: np.random.Generator, config: DataConfig) -> AugmentDraw:
    if not config.augment:
        return AugmentDraw()
    return AugmentDraw(
        flip=bool(rng.integers(0, 2)),
        rotations=int(rng.integers(0, 4)),
        brightness=float(rng.uniform(-config.brightness, config.brightness)),
    )


def apply_augment(sample: MattingSample, draw: AugmentDraw) -> MattingSample:
    if draw == AugmentDraw():
        return sample

    def spatial(x):
        if draw.flip:
            x = x[..., ::-1]
        if draw.rotations:
            x = np.rot90(x, draw.rotations, axes=(-2, -1))
        return np.ascontiguousarray(x)

    alpha, trimap = spatial(sample.alpha), spatial(sample.trimap)
    fg, bg = spatial(sample.fg), spatial(sample.bg)
    if draw.brightness:
        delta = np.float32(draw.brightness)
        fg = np.clip(fg + delta, 0, 1).astype(np.float32)
        bg = np.clip(bg + delta, 0, 1).astype(np.float32)
    # recomposite rather than transform the image so the compositing identity stays exact
    return MattingSample(composite(alpha, fg, bg), trimap, alpha, fg, bg, sample.sample_id)


def augment(sample: MattingSample, rng: np.random.Generator, config: DataConfig = DataConfig()) -> MattingSample:
    return apply_augment(sample, draw_augment(rng, config))


@dataclass
class Batch:
    image: torch.Tensor  # (B, 3, H, W)
    trimap: torch.Tensor  # (B, 1, H, W)
    alpha: torch.Tensor  # (B, 1, H, W)
    fg: torch.Tensor
    bg: torch.Tensor

    def __len__(self):
        return self.image.shape[0]


def collate(samples: list[MattingSample]) -> Batch:
    def stack(name, plane=False):
        arr = np.stack([getattr(s, name) for s in samples])
        return torch.from_numpy(arr[:, None] if plane else arr)

    return Batch(stack("image"), stack("trimap", True), stack("alpha", True), stack("fg"), stack("bg"))


class MattingDataset:
    """In-memory synthetic dataset; sample ``i`` is ``generate_sample(seed, i)``."""

    def __init__(self, seed: int, size: int, config: DataConfig = DataConfig(), split: str = "train"):
        self.seed, self.config, self.split = seed, config, split
        self.samples = [generate_sample(seed, i, config, split) for i in range(size)]

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i) -> MattingSample:
        return self.samples[i]

    def batch(self, indices, rng: np.random.Generator | None = None) -> Batch:
        picked = [self.samples[i] for i in indices]
        if rng is not None:
            picked = [augment(s, rng, self.config) for s in picked]
        return collate(picked)

    def batches(self, batch_size: int):
        for start in range(0, len(self), batch_size):
            yield self.batch(range(start, min(start + batch_size, len(self))))

    def with_config(self, **changes) -> "MattingDataset":
        clone = object.__new__(MattingDataset)
        clone.seed, clone.split, clone.samples = self.seed, self.split, self.samples
        clone.config = replace(self.config, **changes)
        return clone
