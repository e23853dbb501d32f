"""Path-adaptive matting supernet.

Layout: a regular-conv stem, ``n`` bypassable depthwise stages (each preceded
by a path selection layer and paired with a learnable connect layer),
pyramid pooling and a light skip-connected decoder. A learned embedding of
the bucketed FLOP budget conditions every selection layer.

Parameters under ``selectors.`` and ``embedding.`` form the path estimator;
everything else is the matting network.
"""
from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .pathlearn import RelaxedPath, relax
from .pathspace import CostTable, LayerSpec, Path, budget_bucket, cost_bounds, path_cost

CHECKPOINT_FORMAT = "pam-checkpoint"
CHECKPOINT_VERSION = 1
ESTIMATOR_PREFIXES = ("selectors.", "embedding.")
HEAD_GAIN = 0.1


@dataclass(frozen=True)
class SupernetConfig:
    resolution: int = 64
    input_channels: int = 4
    stem_channels: tuple[int, ...] = (16, 32)
    stages: int = 4
    channels: int = 32
    kernel_size: int = 5
    expansion: int = 2
    connect_reduction: int = 4
    pyramid_scales: tuple[int, ...] = (1, 2, 4)
    embedding_buckets: int = 64
    embedding_dim: int = 16
    mlp_hidden: int = 32

    def __post_init__(self):
        object.__setattr__(self, "stem_channels", tuple(self.stem_channels))
        object.__setattr__(self, "pyramid_scales", tuple(self.pyramid_scales))
        positive = (
            "resolution", "stages", "channels", "kernel_size", "expansion",
            "connect_reduction", "embedding_buckets", "embedding_dim", "mlp_hidden",
        )
        for name in positive:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.input_channels != 4:
            raise ValueError("input_channels must be 4 (RGB + trimap)")
        if not self.stem_channels or min(self.stem_channels) < 2:
            raise ValueError("stem_channels must be a nonempty list of widths >= 2")
        if self.stem_channels[-1] != self.channels:
            raise ValueError("stem_channels: last stem width must equal channels")
        if self.channels % self.connect_reduction:
            raise ValueError("connect_reduction must divide channels")
        if self.resolution % self.stride:
            raise ValueError(f"resolution must be divisible by the total stride {self.stride}")
        if not self.pyramid_scales or min(self.pyramid_scales) < 1:
            raise ValueError("pyramid_scales must be positive")
        if max(self.pyramid_scales) > self.feature_size:
            raise ValueError("pyramid_scales: scale exceeds the stage feature size")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.embedding_buckets < 2:
            raise ValueError("embedding_buckets must be at least 2")

    @property
    def stride(self) -> int:
        return 2 ** len(self.stem_channels)

    @property
    def feature_size(self) -> int:
        return self.resolution // self.stride

    @property
    def reduced(self) -> int:
        return self.channels // self.connect_reduction

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stem_channels"] = list(self.stem_channels)
        d["pyramid_scales"] = list(self.pyramid_scales)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _decoder_widths(config: SupernetConfig) -> list[int]:
    # decoder level L (deepest first) fuses with the stem input at that level
    stem = config.stem_channels
    return [stem[level - 1] if level else max(stem[0] // 2, 1) for level in reversed(range(len(stem)))]


def layer_specs(config: SupernetConfig) -> dict:
    """Every FLOP-bearing layer of the architecture, grouped as fixed / per-stage execute / per-stage bypass."""
    res, c = config.resolution, config.channels
    fixed = []
    in_ch = config.input_channels
    for i, width in enumerate(config.stem_channels):
        side = res // 2 ** (i + 1)
        fixed.append(LayerSpec("regular-conv", 3, in_ch, width, side, side, stride=2))
        in_ch = width
    for _ in range(config.stages):
        fixed += [
            LayerSpec("pooling", 1, c, c, 1, 1),
            LayerSpec("pointwise-conv", 1, c, config.reduced, 1, 1),
            LayerSpec("pointwise-conv", 1, config.reduced, c, 1, 1),
            LayerSpec("mlp", 1, config.reduced + config.embedding_dim, config.mlp_hidden, 1, 1),
            LayerSpec("mlp", 1, config.mlp_hidden, 2, 1, 1),
        ]
    fs = config.feature_size
    for s in config.pyramid_scales:
        fixed += [
            LayerSpec("pooling", 1, c, c, s, s),
            LayerSpec("pointwise-conv", 1, c, config.reduced, s, s),
            LayerSpec("upsample", 1, config.reduced, config.reduced, fs, fs),
        ]
    fixed.append(LayerSpec("pointwise-conv", 1, c + len(config.pyramid_scales) * config.reduced, c, fs, fs))
    feat = c
    skip_channels = (config.input_channels, *config.stem_channels[:-1])
    for level, width in zip(reversed(range(len(config.stem_channels))), _decoder_widths(config)):
        side = res // 2**level
        fixed.append(LayerSpec("upsample", 1, feat, feat, side, side))
        fixed.append(LayerSpec("pointwise-conv", 1, feat + skip_channels[level], width, side, side))
        if level:
            fixed.append(LayerSpec("depthwise-conv", 3, width, width, side, side))
        else:
            fixed.append(LayerSpec("regular-conv", 3, width, 1, side, side))
        feat = width
    hidden = c * config.expansion
    execute = [
        [
            LayerSpec("depthwise-conv", config.kernel_size, c, c, fs, fs),
            LayerSpec("pointwise-conv", 1, c, hidden, fs, fs),
            LayerSpec("pointwise-conv", 1, hidden, c, fs, fs),
        ]
        for _ in range(config.stages)
    ]
    bypass = [
        [
            LayerSpec("pointwise-conv", 1, c, config.reduced, fs, fs),
            LayerSpec("pointwise-conv", 1, config.reduced, c, fs, fs),
        ]
        for _ in range(config.stages)
    ]
    return {"fixed": fixed, "execute": execute, "bypass": bypass}


def cost_table(config: SupernetConfig) -> CostTable:
    specs = layer_specs(config)
    return CostTable.from_layers(specs["fixed"], specs["execute"], specs["bypass"])


class PathSelectionLayer(nn.Module):
    """Channel attention that also emits the (bypass, execute) logits for its stage."""

    def __init__(self, channels, squeezed, embedding_dim, hidden):
        super().__init__()
        self.squeeze = nn.Conv2d(channels, squeezed, 1)
        self.excite = nn.Conv2d(squeezed, channels, 1)
        self.mlp = nn.Sequential(nn.Linear(squeezed + embedding_dim, hidden), nn.ReLU(), nn.Linear(hidden, 2))

    def forward(self, feat, constraint):
        if feat.shape[1] != self.squeeze.in_channels:
            raise ValueError(f"selection layer expects {self.squeeze.in_channels} channels, got {feat.shape[1]}")
        gs = F.relu(self.squeeze(F.adaptive_avg_pool2d(feat, 1)))
        refined = feat * torch.sigmoid(self.excite(gs))
        logits = self.mlp(torch.cat([gs.flatten(1), constraint], dim=1))
        return refined, logits


class DepthwiseStage(nn.Module):
    def __init__(self, channels, kernel_size, expansion):
        super().__init__()
        self.dw = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2, groups=channels)
        self.pw1 = nn.Conv2d(channels, channels * expansion, 1)
        self.pw2 = nn.Conv2d(channels * expansion, channels, 1)

    def forward(self, x):
        return x + self.pw2(F.relu(self.pw1(self.dw(x))))


class ConnectLayer(nn.Module):
    """Pointwise bottleneck residual standing in for a bypassed stage."""

    def __init__(self, channels, reduced):
        super().__init__()
        self.reduce = nn.Conv2d(channels, reduced, 1)
        self.expand = nn.Conv2d(reduced, channels, 1)

    def forward(self, x):
        if x.shape[1] != self.reduce.in_channels:
            raise ValueError(f"connect layer expects {self.reduce.in_channels} channels, got {x.shape[1]}")
        return x + self.expand(F.relu(self.reduce(x)))


class PyramidPooling(nn.Module):
    def __init__(self, channels, reduced, scales):
        super().__init__()
        self.scales = tuple(scales)
        self.branches = nn.ModuleList(nn.Conv2d(channels, reduced, 1) for _ in self.scales)
        self.fuse = nn.Conv2d(channels + reduced * len(self.scales), channels, 1)

    def forward(self, x):
        size = x.shape[-2:]
        parts = [x]
        for scale, conv in zip(self.scales, self.branches):
            y = F.relu(conv(F.adaptive_avg_pool2d(x, scale)))
            parts.append(F.interpolate(y, size=size, mode="bilinear", align_corners=False))
        return F.relu(self.fuse(torch.cat(parts, dim=1)))


class DecoderLevel(nn.Module):
    def __init__(self, in_channels, skip_channels, width, last):
        super().__init__()
        self.fuse = nn.Conv2d(in_channels + skip_channels, width, 1)
        self.out = nn.Conv2d(width, 1, 3, padding=1) if last else nn.Conv2d(width, width, 3, padding=1, groups=width)
        self.last = last

    def forward(self, x, skip):
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        x = F.relu(self.fuse(torch.cat([x, skip], dim=1)))
        x = self.out(x)
        return x if self.last else F.relu(x)


class BudgetedOutput(NamedTuple):
    alpha: torch.Tensor
    paths: list[Path]
    logits: list[torch.Tensor]


class RelaxedOutput(NamedTuple):
    alpha: torch.Tensor
    relaxed: RelaxedPath
    logits: list[torch.Tensor]


class PamSupernet(nn.Module):
    def __init__(self, config: SupernetConfig = SupernetConfig()):
        super().__init__()
        self.config = config
        c = config.channels
        stem, in_ch = [], config.input_channels
        for width in config.stem_channels:
            stem.append(nn.Conv2d(in_ch, width, 3, stride=2, padding=1))
            in_ch = width
        self.stem = nn.ModuleList(stem)
        self.embedding = nn.Embedding(config.embedding_buckets, config.embedding_dim)
        self.selectors = nn.ModuleList(
            PathSelectionLayer(c, config.reduced, config.embedding_dim, config.mlp_hidden) for _ in range(config.stages)
        )
        self.stages = nn.ModuleList(DepthwiseStage(c, config.kernel_size, config.expansion) for _ in range(config.stages))
        self.connects = nn.ModuleList(ConnectLayer(c, config.reduced) for _ in range(config.stages))
        self.pyramid = PyramidPooling(c, config.reduced, config.pyramid_scales)
        skip_channels = (config.input_channels, *config.stem_channels[:-1])
        decoder, feat = [], c
        for level, width in zip(reversed(range(len(config.stem_channels))), _decoder_widths(config)):
            decoder.append(DecoderLevel(feat, skip_channels[level], width, last=level == 0))
            feat = width
        self.decoder = nn.ModuleList(decoder)
        self.table = cost_table(config)
        self.bounds = cost_bounds(self.table)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for module in self.modules():
                if isinstance(module, (nn.Conv2d, nn.Linear)):
                    nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu", generator=gen)
                    nn.init.zeros_(module.bias)
                elif isinstance(module, nn.Embedding):
                    nn.init.normal_(module.weight, generator=gen)
            # start the alpha head mid-range: a saturated clamp passes no gradient
            head = self.decoder[-1].out
            head.weight.mul_(HEAD_GAIN)
            head.bias.fill_(0.5)

    # -- pieces -------------------------------------------------------------

    def embed_constraint(self, budget: int, batch: int = 1) -> torch.Tensor:
        c_min, c_max = self.bounds
        if not c_min <= budget <= c_max:
            raise ValueError(f"budget {budget} outside [{c_min}, {c_max}]")
        bucket = budget_bucket(int(budget), self.bounds, self.config.embedding_buckets)
        row = self.embedding.weight[bucket]
        return row.unsqueeze(0).expand(batch, -1)

    def _inputs(self, image, trimap):
        r = self.config.resolution
        if image.dim() != 4 or image.shape[1:] != (3, r, r):
            raise ValueError(f"image must be (B, 3, {r}, {r}), got {tuple(image.shape)}")
        if trimap.shape != (image.shape[0], 1, r, r):
            raise ValueError(f"trimap must be (B, 1, {r}, {r}), got {tuple(trimap.shape)}")
        return torch.cat([image, trimap], dim=1)

    def _encode(self, x):
        skips = []
        for conv in self.stem:
            skips.append(x)
            x = F.relu(conv(x))
        return x, skips

    def _decode(self, feat, skips):
        x = self.pyramid(feat)
        for level, skip in zip(self.decoder, reversed(skips)):
            x = level(x, skip)
        return x.clamp(0.0, 1.0)

    def _branch(self, i, refined, execute, soft=None):
        """Route ``refined`` through stage ``i`` (execute) or its connect layer.

        ``execute`` is a per-sample bool tensor. With ``soft`` the selected
        output gains a zero-valued term carrying straight-through gradients
        to the soft decision, so forward values match plain routing exactly.
        """
        if soft is None and bool(execute.all()):
            return self.stages[i](refined)
        if soft is None and not bool(execute.any()):
            return self.connects[i](refined)
        run = self.stages[i](refined)
        skip = self.connects[i](refined)
        out = torch.where(execute.view(-1, 1, 1, 1), run, skip)
        if soft is not None:
            s_skip = (soft[:, 0] - soft[:, 0].detach()).view(-1, 1, 1, 1)
            s_run = (soft[:, 1] - soft[:, 1].detach()).view(-1, 1, 1, 1)
            out = out + s_run * run + s_skip * skip
        return out

    def _run(self, image, trimap, budget, decide):
        feat, skips = self._encode(self._inputs(image, trimap))
        constraint = self.embed_constraint(budget, feat.shape[0])
        logits, decisions, softs = [], [], []
        for i in range(self.config.stages):
            refined, stage_logits = self.selectors[i](feat, constraint)
            execute, soft = decide(i, stage_logits)
            logits.append(stage_logits)
            decisions.append(execute)
            softs.append(soft)
            feat = self._branch(i, refined, execute, soft)
        return self._decode(feat, skips), logits, torch.stack(decisions, dim=1), softs

    # -- public forwards --------------------------------------------------------

    def _path_tensor(self, paths, batch):
        if isinstance(paths, Path):
            paths = [paths] * batch
        if len(paths) != batch:
            raise ValueError(f"need one path per sample ({batch}), got {len(paths)}")
        for p in paths:
            if len(p) != self.config.stages:
                raise ValueError(f"path has {len(p)} stages, network has {self.config.stages}")
        return torch.tensor([list(p) for p in paths], dtype=torch.bool)

    def forward_path(self, image, trimap, path) -> torch.Tensor:
        """Alpha along a fixed path (one ``Path`` for the batch, or one per sample)."""
        fixed = self._path_tensor(path, image.shape[0])
        # selection logits are ignored here, so any in-range budget gives the same output
        budget = self.bounds[1]
        alpha, _, _, _ = self._run(image, trimap, budget, lambda i, _logits: (fixed[:, i], None))
        return alpha

    def forward(self, image, trimap, path):
        return self.forward_path(image, trimap, path)

    def forward_budgeted(self, image, trimap, budget: int) -> BudgetedOutput:
        """Argmax routing, projected onto the feasible set by flipping the least confident executed stage."""
        alpha, logits, decisions, _ = self._run(
            image, trimap, budget, lambda i, lg: (lg[:, 1] > lg[:, 0], None)
        )
        margins = torch.stack([lg[:, 1] - lg[:, 0] for lg in logits], dim=1).detach()
        paths, changed = [], False
        for row, margin in zip(decisions.tolist(), margins.tolist()):
            row = [int(d) for d in row]
            while path_cost(Path(tuple(row)), self.table) > budget:
                executed = [i for i, d in enumerate(row) if d]
                row[min(executed, key=lambda i: (margin[i], i))] = 0
                changed = True
            paths.append(Path(tuple(row)))
        if changed:
            alpha = self.forward_path(image, trimap, paths)
        return BudgetedOutput(alpha, paths, logits)

    def forward_relaxed(self, image, trimap, budget: int, tau: float, noise) -> RelaxedOutput:
        """Gumbel-perturbed routing: hard one-hot forward, softmax gradients."""
        if not tau > 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        b, n = image.shape[0], self.config.stages
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape == (n, 2):
            noise = np.broadcast_to(noise, (b, n, 2)).copy()
        if noise.shape != (b, n, 2):
            raise ValueError(f"noise must have shape ({n}, 2) or ({b}, {n}, 2), got {noise.shape}")
        softs, hards = [], []

        def decide(i, lg):
            soft, hard = relax(lg, noise[:, i], tau)
            softs.append(soft)
            hards.append(hard)
            return hard[:, 1].bool(), soft

        alpha, logits, _, _ = self._run(image, trimap, budget, decide)
        relaxed = RelaxedPath(torch.stack(softs, dim=1), torch.stack(hards, dim=1), noise)
        return RelaxedOutput(alpha, relaxed, logits)


def hard_paths(relaxed: RelaxedPath) -> list[Path]:
    return [Path(tuple(int(v) for v in row)) for row in relaxed.hard[..., 1].tolist()]


def is_estimator_param(name: str) -> bool:
    return name.startswith(ESTIMATOR_PREFIXES)


@dataclass
class Checkpoint:
    config: SupernetConfig
    params: "OrderedDict[str, np.ndarray]"
    stage: int = 1
    epoch: int = 0
    version: int = CHECKPOINT_VERSION
    extra: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return self.config.hash()

    @classmethod
    def from_model(cls, model: PamSupernet, stage: int, epoch: int, extra: dict | None = None) -> "Checkpoint":
        params = OrderedDict(
            (k, v.detach().cpu().numpy().astype(np.float32, copy=True)) for k, v in model.state_dict().items()
        )
        return cls(model.config, params, stage, epoch, extra=dict(extra or {}))

    def to_model(self) -> PamSupernet:
        model = PamSupernet(self.config)
        state = model.state_dict()
        if set(state) != set(self.params):
            missing = sorted(set(state) ^ set(self.params))
            raise ValueError(f"checkpoint parameters do not match the architecture: {missing[:5]}")
        for name, value in self.params.items():
            if tuple(value.shape) != tuple(state[name].shape):
                raise ValueError(f"parameter {name} has shape {value.shape}, architecture needs {tuple(state[name].shape)}")
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in self.params.items()})
        return model

    def to_bytes(self) -> bytes:
        from safetensors.numpy import save

        for name, value in self.params.items():
            if not np.all(np.isfinite(value)):
                raise ValueError(f"parameter {name} has non-finite entries")
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "version": self.version,
            "config": self.config.to_dict(),
            "config_hash": self.config_hash,
            "stage": self.stage,
            "epoch": self.epoch,
            "extra": self.extra,
        }
        # a single metadata key: safetensors does not preserve metadata key order
        metadata = {"manifest": json.dumps(manifest, sort_keys=True, separators=(",", ":"))}
        return save(dict(self.params), metadata=metadata)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        from safetensors.numpy import load

        header_len = int.from_bytes(blob[:8], "little")
        header = json.loads(blob[8 : 8 + header_len])
        try:
            meta = json.loads(header["__metadata__"]["manifest"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError("not a pam checkpoint") from exc
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a pam checkpoint")
        if int(meta["version"]) != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        config = SupernetConfig(**meta["config"])
        if config.hash() != meta["config_hash"]:
            raise ValueError("checkpoint config hash does not match its config")
        tensors = load(blob)
        order = [k for k in PamSupernet(config).state_dict() if k in tensors]
        params = OrderedDict((k, tensors[k]) for k in order + sorted(set(tensors) - set(order)))
        return cls(config, params, int(meta["stage"]), int(meta["epoch"]), extra=meta.get("extra", {}))


def build(config: SupernetConfig = SupernetConfig(), seed: int = 0) -> Checkpoint:
    model = PamSupernet(config)
    model.reset_parameters(seed)
    return Checkpoint.from_model(model, stage=1, epoch=0)


def parameter_count(checkpoint: Checkpoint) -> int:
    return int(sum(v.size for v in checkpoint.params.values()))
