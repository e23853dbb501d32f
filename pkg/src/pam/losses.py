"""Training losses and the standard matting error metrics.

Alpha losses are restricted to the trimap-unknown region. Tensors are
``(B, 1, H, W)`` for alpha-like planes and ``(B, 3, H, W)`` for colours;
unbatched ``(H, W)`` planes are accepted by the metrics only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.ndimage
import torch
import torch.nn.functional as F
from skimage.measure import label as connected_components

from .pathspace import Path

UNKNOWN = 0.5


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    ds: float = 0.05
    pt: float = 0.05
    l1: float = 1.0
    comp: float = 0.25
    lap: float = 0.5
    eps: float = 1e-6

    def __post_init__(self):
        for name in ("alpha", "ds", "pt", "l1", "comp", "lap"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


def unknown_region(trimap: torch.Tensor) -> torch.Tensor:
    return trimap == UNKNOWN


def _masked_mean(values: torch.Tensor, region: torch.Tensor) -> torch.Tensor:
    region = region.expand_as(values)
    count = region.sum()
    if count == 0:
        raise ValueError("loss region is empty")
    return torch.where(region, values, torch.zeros_like(values)).sum() / count


def charbonnier(diff: torch.Tensor, eps: float) -> torch.Tensor:
    return torch.sqrt(diff * diff + eps * eps)


def l1_alpha(pred, gt, region, eps: float = 1e-6):
    _same_shape(pred, gt)
    return _masked_mean(charbonnier(pred - gt, eps), region)


def compositional_loss(pred, fg, bg, image, region, eps: float = 1e-6):
    composite = pred * fg + (1.0 - pred) * bg
    return _masked_mean(charbonnier(image - composite, eps), region)


def distillation_loss(pred, teacher_pred, region, eps: float = 1e-6):
    _same_shape(pred, teacher_pred)
    return _masked_mean(charbonnier(pred - teacher_pred, eps), region)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _binomial_kernel(dtype, device) -> torch.Tensor:
    k = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0], dtype=dtype, device=device)
    return (torch.outer(k, k) / 256.0).view(1, 1, 5, 5)


def _blur(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    channels = x.shape[1]
    x = F.pad(x, (2, 2, 2, 2), mode="replicate")
    return F.conv2d(x, kernel.expand(channels, 1, 5, 5), groups=channels)


def _downsample(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    # 2x2 averaging after the blur keeps the pyramid mirror-symmetric on even sides
    return F.avg_pool2d(_blur(x, kernel), 2)


def _upsample(x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    return _blur(x.repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1), kernel)


def laplacian_pyramid(x: torch.Tensor, levels: int = 5) -> list[torch.Tensor]:
    """``levels - 1`` band-pass images followed by the low-pass residual."""
    side = x.shape[-1]
    if x.shape[-2] != side:
        raise ValueError("laplacian pyramid needs square inputs")
    if levels < 1 or side % (2 ** (levels - 1)):
        raise ValueError(f"side {side} not divisible by 2^{levels - 1}")
    kernel = _binomial_kernel(x.dtype, x.device)
    pyramid = []
    current = x
    for _ in range(levels - 1):
        down = _downsample(current, kernel)
        pyramid.append(current - _upsample(down, kernel))
        current = down
    pyramid.append(current)
    return pyramid


def laplacian_loss(pred, gt, levels: int = 5):
    _same_shape(pred, gt)
    total = 0
    for level, (p, g) in enumerate(zip(laplacian_pyramid(pred, levels), laplacian_pyramid(gt, levels))):
        total = total + (2**level) * (p - g).abs().mean()
    return total


def alpha_loss(pred, gt, fg, bg, image, region, weights: LossWeights = LossWeights()):
    return (
        weights.l1 * l1_alpha(pred, gt, region, weights.eps)
        + weights.comp * compositional_loss(pred, fg, bg, image, region, weights.eps)
        + weights.lap * laplacian_loss(pred, gt)
    )


def path_loss(logits, label):
    """Cross-entropy of every stage's logit pair against the label path, summed over stages.

    ``logits`` is a list with one ``(B, 2)`` tensor per stage; ``label`` is a
    ``(B, n_stages)`` integer tensor or a single path broadcast to the batch.
    Returns the batch mean of the per-sample sums.
    """
    if isinstance(label, Path):
        label = label.decisions
    label = torch.as_tensor(label, dtype=torch.long)
    if label.dim() == 1:
        label = label.unsqueeze(0).expand(logits[0].shape[0], -1)
    if label.shape[1] != len(logits):
        raise ValueError(f"label has {label.shape[1]} stages, got {len(logits)} logit pairs")
    total = 0
    for i, stage_logits in enumerate(logits):
        total = total + F.cross_entropy(stage_logits, label[:, i], reduction="mean")
    return total


def total_loss(components: dict, weights: LossWeights = LossWeights()):
    for name, value in components.items():
        value = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(value):
            raise ValueError(f"non-finite loss component {name}: {value}")
    return (
        weights.alpha * components.get("alpha", 0.0)
        + weights.ds * components.get("ds", 0.0)
        + weights.pt * components.get("pt", 0.0)
    )


def unknown_l1(pred, gt, region, per_sample: bool = False):
    """Plain mean absolute alpha error over the unknown region (no smoothing)."""
    err = (pred - gt).abs()
    if not per_sample:
        return _masked_mean(err, region)
    region = region.expand_as(err)
    counts = region.flatten(1).sum(1)
    if (counts == 0).any():
        raise ValueError("a sample has an empty unknown region")
    return torch.where(region, err, torch.zeros_like(err)).flatten(1).sum(1) / counts


# --- metrics -----------------------------------------------------------------


def _gauss(x, sigma):
    return np.exp(-(x**2) / (2 * sigma**2)) / (sigma * np.sqrt(2 * np.pi))


def _dgauss(x, sigma):
    return -x * _gauss(x, sigma) / sigma**2


def gaussian_gradient(im: np.ndarray, sigma: float = 1.4) -> tuple[np.ndarray, np.ndarray]:
    epsilon = 1e-2
    half = int(np.ceil(sigma * np.sqrt(-2 * np.log(np.sqrt(2 * np.pi) * sigma * epsilon))))
    u = np.arange(-half, half + 1)
    hx = _gauss(u, sigma)[:, None] * _dgauss(u, sigma)[None, :]
    hx = hx / np.sqrt(np.sum(hx * hx))
    gx = scipy.ndimage.convolve(im, hx, mode="nearest")
    gy = scipy.ndimage.convolve(im, hx.T, mode="nearest")
    return gx, gy


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels = connected_components(mask, connectivity=1)
    if labels.max() == 0:
        return np.zeros_like(mask, dtype=bool)
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    return labels == np.argmax(counts)


def connectivity_map(pred: np.ndarray, gt: np.ndarray, step: float = 0.1) -> np.ndarray:
    thresholds = np.arange(0, 1 + step, step)
    level = np.full(pred.shape, -1.0)
    for i in range(1, len(thresholds)):
        omega = _largest_component((pred >= thresholds[i]) & (gt >= thresholds[i]))
        level[(level == -1) & ~omega] = thresholds[i - 1]
    level[level == -1] = 1.0
    pred_d = pred - level
    gt_d = gt - level
    pred_phi = 1 - pred_d * (pred_d >= 0.15)
    gt_phi = 1 - gt_d * (gt_d >= 0.15)
    return np.abs(pred_phi - gt_phi)


def metric_suite(pred, gt, trimap, sigma: float = 1.4, conn_step: float = 0.1) -> dict:
    """SAD, MSE, GRAD and CONN over the unknown region of one ``(H, W)`` matte.

    Scaling: SAD and CONN are divided by 1000; MSE (a mean) and GRAD (a sum)
    are multiplied by 1000.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    region = np.asarray(trimap) == UNKNOWN
    if pred.shape != gt.shape or region.shape != gt.shape:
        raise ValueError("pred, gt and trimap shapes differ")
    if not region.any():
        raise ValueError("trimap has no unknown pixels")
    diff = pred - gt
    sad = np.abs(diff)[region].sum() / 1000.0
    mse = (diff[region] ** 2).mean() * 1000.0
    px, py = gaussian_gradient(pred, sigma)
    gx, gy = gaussian_gradient(gt, sigma)
    grad_err = (np.hypot(px, py) - np.hypot(gx, gy)) ** 2
    grad = grad_err[region].sum() * 1000.0
    conn = connectivity_map(pred, gt, conn_step)[region].sum() / 1000.0
    return {"sad": float(sad), "mse": float(mse), "grad": float(grad), "conn": float(conn)}
