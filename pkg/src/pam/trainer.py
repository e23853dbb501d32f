"""Three-stage training: full-network pretraining, uniform random-path
warm-up, and performance-aware path learning; plus budgeted evaluation."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch

from . import losses
from .losses import LossWeights, unknown_l1, unknown_region
from .pathlearn import PriorTable, draw_from_prior, evaluate_candidates, generate_label, gumbel_noise
from .pathspace import Path, cost_bounds, enumerate_paths, path_cost
from .supernet import Checkpoint, PamSupernet, SupernetConfig, hard_paths
from .synthdata import DataConfig, MattingDataset

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "lr", "loss_total", "loss_alpha", "loss_ds", "loss_pt", "label_source_frac_network"]


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 20
    stage2_epochs: int = 5
    stage3_epochs: int = 20
    batch_size: int = 4
    lr: float = 3e-4
    weight_decay: float = 3e-5
    betas: tuple[float, float] = (0.5, 0.999)
    n_e: int = 4
    n_g: int = 10
    n_val: int = 200
    tau: float = 1.0
    lambda_alpha: float = 1.0
    lambda_ds: float = 0.05
    lambda_pt: float = 0.05
    lambda_1: float = 1.0
    lambda_comp: float = 0.25
    lambda_lap: float = 0.5
    eps: float = 1e-6
    seed: int = 0
    train_size: int = 2000
    eval_size: int = 200

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        for name in ("stage1_epochs", "stage2_epochs", "stage3_epochs", "batch_size", "n_e", "n_g", "n_val",
                     "train_size", "eval_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        LossWeights(self.lambda_alpha, self.lambda_ds, self.lambda_pt, self.lambda_1, self.lambda_comp,
                    self.lambda_lap, self.eps)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(
            self.lambda_alpha, self.lambda_ds, self.lambda_pt, self.lambda_1, self.lambda_comp, self.lambda_lap, self.eps
        )

    def epochs(self, stage: int) -> int:
        return (self.stage1_epochs, self.stage2_epochs, self.stage3_epochs)[stage - 1]


@dataclass(frozen=True)
class RunConfig:
    model: SupernetConfig = SupernetConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()

    def to_dict(self) -> dict:
        flat = {}
        flat.update(self.model.to_dict())
        flat.update({k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.train).items()})
        flat.update({k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.data).items()})
        return flat

    @classmethod
    def from_dict(cls, flat: dict) -> "RunConfig":
        """Build from one flat key-value mapping; ``resolution`` is shared by model and data."""
        groups = {
            "model": {f.name for f in fields(SupernetConfig)},
            "train": {f.name for f in fields(TrainConfig)},
            "data": {f.name for f in fields(DataConfig)},
        }
        unknown = set(flat) - set().union(*groups.values())
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        parts = {g: {k: v for k, v in flat.items() if k in names} for g, names in groups.items()}
        return cls(SupernetConfig(**parts["model"]), TrainConfig(**parts["train"]), DataConfig(**parts["data"]))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class TrainingDiverged(RuntimeError):
    pass


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps < 1:
        raise ValueError("total_steps must be at least 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1 + math.cos(math.pi * step / total_steps)) / 2


@dataclass
class StageResult:
    checkpoint: Checkpoint
    log: list[dict]
    info: dict = field(default_factory=dict)

    def log_csv(self) -> str:
        return format_log(self.log)


def format_log(rows: list[dict]) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(out, LOG_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return out.getvalue()


def make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.RAdam(model.parameters(), lr=config.lr, betas=config.betas, weight_decay=config.weight_decay)


def _check_finite(components: dict, epoch: int, batch: int) -> None:
    bad = {k: v for k, v in components.items() if not math.isfinite(float(v.detach()))}
    if bad:
        detail = ", ".join(f"{k}={float(v.detach()):.6g}" for k, v in components.items())
        raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")


def _train_loop(model, config: TrainConfig, data: MattingDataset, stage: int, step_fn, rng) -> list[dict]:
    optimizer = make_optimizer(model, config)
    epochs = config.epochs(stage)
    iters = math.ceil(len(data) / config.batch_size)
    total = epochs * iters
    weights = config.weights
    step = 0
    rows = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(data))
        sums = {"total": 0.0, "alpha": 0.0, "ds": 0.0, "pt": 0.0, "network": 0.0}
        for k in range(iters):
            lr = cosine_lr(step, total, config.lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = data.batch(order[k * config.batch_size : (k + 1) * config.batch_size], rng)
            components, network_frac = step_fn(batch, rng)
            _check_finite(components, epoch, k)
            loss = losses.total_loss(components, weights)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            sums["total"] += float(loss.detach())
            for name in ("alpha", "ds", "pt"):
                sums[name] += float(components[name].detach()) if name in components else 0.0
            sums["network"] += network_frac
        rows.append({
            "epoch": epoch,
            "lr": cosine_lr(step, total, config.lr),  # rate after the epoch's last update; 0 at stage end
            "loss_total": sums["total"] / iters,
            "loss_alpha": sums["alpha"] / iters,
            "loss_ds": sums["ds"] / iters,
            "loss_pt": sums["pt"] / iters,
            "label_source_frac_network": sums["network"] / iters,
        })
        log.info("stage %d epoch %d/%d loss %.5f", stage, epoch, epochs, rows[-1]["loss_total"])
    return rows


def _alpha_term(pred, batch, weights: LossWeights):
    return losses.alpha_loss(pred, batch.alpha, batch.fg, batch.bg, batch.image, unknown_region(batch.trimap), weights)


def run_stage1(checkpoint: Checkpoint, config: TrainConfig, data: MattingDataset) -> StageResult:
    """Train the complete network (every stage executed) on the alpha loss alone."""
    if checkpoint.stage != 1:
        raise ValueError(f"stage 1 needs a fresh or stage-1 checkpoint, got stage {checkpoint.stage}")
    model = checkpoint.to_model()
    full = Path.all_execute(model.config.stages)
    weights = replace(config.weights, ds=0.0, pt=0.0)

    def step(batch, rng):
        pred = model.forward_path(batch.image, batch.trimap, full)
        return {"alpha": _alpha_term(pred, batch, weights)}, 0.0

    rows = _train_loop(model, config, data, 1, step, np.random.default_rng([config.seed, 1]))
    return StageResult(Checkpoint.from_model(model, stage=1, epoch=config.stage1_epochs), rows)


def run_stage2(checkpoint: Checkpoint, config: TrainConfig, data: MattingDataset) -> StageResult:
    """Single-path warm-up: each iteration trains one uniformly drawn sub-network."""
    if checkpoint.stage != 1:
        raise ValueError(f"stage 2 needs a stage-1 checkpoint, got stage {checkpoint.stage}")
    model = checkpoint.to_model()
    n = model.config.stages
    weights = replace(config.weights, ds=0.0, pt=0.0)
    histogram = np.zeros(2**n, dtype=np.int64)

    def step(batch, rng):
        path = Path.from_index(int(rng.integers(0, 2**n)), n)
        histogram[path.index] += 1
        pred = model.forward_path(batch.image, batch.trimap, path)
        return {"alpha": _alpha_term(pred, batch, weights)}, 0.0

    rows = _train_loop(model, config, data, 2, step, np.random.default_rng([config.seed, 2]))
    ckpt = Checkpoint.from_model(model, stage=2, epoch=config.stage2_epochs)
    return StageResult(ckpt, rows, {"path_histogram": histogram.tolist()})


def run_stage3(
    checkpoint: Checkpoint,
    prior: PriorTable,
    config: TrainConfig,
    data: MattingDataset,
    teacher: Checkpoint,
    budget_range: tuple[int, int] | None = None,
) -> StageResult:
    """Performance-aware path learning.

    Per iteration: draw a budget, score prior candidates on the batch, run
    the Gumbel-relaxed forward, pick per-sample labels, and take one step on
    alpha + distillation + path losses. ``budget_range`` narrows the budget
    draw (defaults to the full feasible range).
    """
    if checkpoint.stage != 2:
        raise ValueError(f"stage 3 needs a stage-2 checkpoint, got stage {checkpoint.stage}")
    if teacher.config_hash != checkpoint.config_hash:
        raise ValueError("teacher and student configs differ")
    model = checkpoint.to_model()
    teacher_model = teacher.to_model()
    teacher_model.requires_grad_(False)
    table, n = model.table, model.config.stages
    lo, hi = budget_range or model.bounds
    if prior.bounds != model.bounds or prior.n_stages != n:
        raise ValueError("prior was built for a different cost table")
    weights = config.weights
    full = Path.all_execute(n)

    def step(batch, rng):
        budget = int(rng.integers(lo, hi + 1))
        candidates = draw_from_prior(prior, budget, config.n_e, rng)
        cand_errors = evaluate_candidates(model, batch, candidates, per_sample=True)
        noise = gumbel_noise(rng, (len(batch), n, 2))
        alpha, relaxed, logits = model.forward_relaxed(batch.image, batch.trimap, budget, config.tau, noise)
        region = unknown_region(batch.trimap)
        net_errors = unknown_l1(alpha.detach(), batch.alpha, region, per_sample=True).double().numpy()
        labels, from_net = [], 0
        for s, v in enumerate(hard_paths(relaxed)):
            decision = generate_label(
                candidates, cand_errors[:, s].tolist(), v, float(net_errors[s]), path_cost(v, table), budget
            )
            labels.append(list(decision.label))
            from_net += decision.from_network
        with torch.no_grad():
            target = teacher_model.forward_path(batch.image, batch.trimap, full)
        components = {
            "alpha": _alpha_term(alpha, batch, weights),
            "ds": losses.distillation_loss(alpha, target, region, weights.eps),
            "pt": losses.path_loss(logits, torch.tensor(labels)),
        }
        return components, from_net / len(batch)

    rows = _train_loop(model, config, data, 3, step, np.random.default_rng([config.seed, 3]))
    return StageResult(Checkpoint.from_model(model, stage=3, epoch=config.stage3_epochs), rows)


def budget_fraction(fraction: float, bounds: tuple[int, int]) -> int:
    """``fraction`` of the largest cost, clipped into the feasible budget range."""
    c_min, c_max = bounds
    return int(min(max(int(fraction * c_max), c_min), c_max))


@torch.no_grad()
def evaluate_model(model: PamSupernet, data: MattingDataset, budgets, chunk: int = 50) -> list[dict]:
    rows = []
    c_min, c_max = model.bounds
    for budget in sorted(int(b) for b in budgets):
        if not c_min <= budget <= c_max:
            raise ValueError(f"budget {budget} outside [{c_min}, {c_max}]")
        flops, feasible, l1s = [], [], []
        metric_sums = {"sad": 0.0, "mse": 0.0, "grad": 0.0, "conn": 0.0}
        for batch in data.batches(chunk):
            out = model.forward_budgeted(batch.image, batch.trimap, budget)
            region = unknown_region(batch.trimap)
            l1s.extend(unknown_l1(out.alpha, batch.alpha, region, per_sample=True).tolist())
            for p in out.paths:
                cost = path_cost(p, model.table)
                flops.append(cost)
                feasible.append(cost <= budget)
            for s in range(len(batch)):
                m = losses.metric_suite(out.alpha[s, 0].numpy(), batch.alpha[s, 0].numpy(), batch.trimap[s, 0].numpy())
                for k in metric_sums:
                    metric_sums[k] += m[k]
        count = len(flops)
        rows.append({
            "budget": budget,
            "flops_mean": float(np.mean(flops)),
            "sad": metric_sums["sad"] / count,
            "mse": metric_sums["mse"] / count,
            "grad": metric_sums["grad"] / count,
            "conn": metric_sums["conn"] / count,
            "l1_unknown": float(np.mean(l1s)),
            "feasibility": float(np.mean(feasible)),
        })
    return rows


@torch.no_grad()
def mean_unknown_l1(model: PamSupernet, data: MattingDataset, budget: int, chunk: int = 50) -> float:
    values = []
    for batch in data.batches(chunk):
        out = model.forward_budgeted(batch.image, batch.trimap, budget)
        values.extend(unknown_l1(out.alpha, batch.alpha, unknown_region(batch.trimap), per_sample=True).tolist())
    return float(np.mean(values))
