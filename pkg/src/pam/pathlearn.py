"""Performance-aware path learning.

Gumbel relaxation of the per-stage execute/bypass logits, a Monte Carlo
estimate of the optimal-path distribution per budget bucket (the prior),
and online path label generation from prior samples plus the network's own
path estimate.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .losses import unknown_l1, unknown_region
from .pathspace import CostTable, Path, bucket_range, budget_bucket, cost_bounds, enumerate_paths, path_cost


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def relax(logits: torch.Tensor, noise, tau: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Soft rows ``softmax((logits + noise) / tau)`` and their hard one-hot argmax.

    Ties go to index 0 (bypass).
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    noise = torch.as_tensor(noise, dtype=logits.dtype)
    soft = torch.softmax((logits + noise) / tau, dim=-1)
    hard = (soft[..., 1] > soft[..., 0]).long()
    return soft, torch.nn.functional.one_hot(hard, 2).to(soft.dtype)


@dataclass
class RelaxedPath:
    soft: torch.Tensor  # (..., n_stages, 2), rows sum to one
    hard: torch.Tensor  # same shape, one-hot
    noise: np.ndarray

    @property
    def straight_through(self) -> torch.Tensor:
        return self.hard + self.soft - self.soft.detach()

    @property
    def path(self) -> Path:
        if self.hard.dim() != 2:
            raise ValueError("path is only defined for a single (n_stages, 2) relaxation")
        return Path(tuple(int(v) for v in self.hard[:, 1]))


def gumbel_sample(logits: torch.Tensor, tau: float, rng: np.random.Generator) -> RelaxedPath:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    noise = gumbel_noise(rng, tuple(logits.shape))
    soft, hard = relax(logits, noise, tau)
    return RelaxedPath(soft, hard, noise)


def uniform_prob(n: int) -> float:
    if n < 1:
        raise ValueError("stage count must be at least 1")
    return 1.0 / 2**n


def candidate_set(budget: int, table: CostTable, n_g: int) -> list[Path]:
    """The ``n_g`` most expensive paths that still fit ``budget``."""
    if n_g < 1:
        raise ValueError("n_g must be at least 1")
    c_min, _ = cost_bounds(table)
    if budget < c_min:
        raise ValueError(f"budget {budget} below the cheapest path cost {c_min}")
    feasible = [(path_cost(p, table), p) for p in enumerate_paths(table.n_stages)]
    feasible = [(c, p) for c, p in feasible if c <= budget]
    feasible.sort(key=lambda cp: (-cp[0], cp[1].index))
    return [p for _, p in feasible[:n_g]]


@dataclass
class BucketPrior:
    lo: int
    hi: int
    probs: dict[int, float]  # canonical path index -> probability; support only


@dataclass
class PriorTable:
    n_stages: int
    bounds: tuple[int, int]
    n_buckets: int
    buckets: dict[int, BucketPrior]
    n_val: int
    n_g: int
    checkpoint_hash: str = ""
    table: CostTable | None = field(default=None, repr=False)

    def __post_init__(self):
        for b, entry in self.buckets.items():
            total = sum(entry.probs.values())
            if any(p < 0 for p in entry.probs.values()) or abs(total - 1.0) > 1e-6:
                raise ValueError(f"bucket {b}: probabilities must be nonnegative and sum to 1")
            if self.table is not None:
                for idx in entry.probs:
                    if path_cost(Path.from_index(idx, self.n_stages), self.table) > entry.lo:
                        raise ValueError(f"bucket {b}: path {idx} infeasible for budget {entry.lo}")

    def bucket_for(self, budget: int) -> BucketPrior:
        b = budget_bucket(budget, self.bounds, self.n_buckets)
        if b not in self.buckets:
            raise ValueError(f"prior has no entry for bucket {b} (budget {budget})")
        return self.buckets[b]

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["bucket", "budget_lo", "budget_hi", "path", "probability"])
        for b in sorted(self.buckets):
            entry = self.buckets[b]
            for idx in sorted(entry.probs):
                bits = str(Path.from_index(idx, self.n_stages))
                writer.writerow([b, entry.lo, entry.hi, bits, repr(float(entry.probs[idx]))])
        return out.getvalue()

    def sidecar(self) -> dict:
        return {
            "n_val": self.n_val,
            "n_g": self.n_g,
            "checkpoint_hash": self.checkpoint_hash,
            "n_stages": self.n_stages,
            "n_buckets": self.n_buckets,
            "c_min": self.bounds[0],
            "c_max": self.bounds[1],
        }

    @classmethod
    def from_files(cls, csv_text: str, sidecar: dict, table: CostTable | None = None) -> "PriorTable":
        buckets: dict[int, BucketPrior] = {}
        reader = csv.DictReader(io.StringIO(csv_text))
        if reader.fieldnames != ["bucket", "budget_lo", "budget_hi", "path", "probability"]:
            raise ValueError(f"unexpected prior header {reader.fieldnames}")
        for line, row in enumerate(reader, start=2):
            try:
                b = int(row["bucket"])
                entry = buckets.setdefault(b, BucketPrior(int(row["budget_lo"]), int(row["budget_hi"]), {}))
                path = Path.from_bits(row["path"])
                entry.probs[path.index] = float(row["probability"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"malformed prior row at line {line}: {exc}") from exc
        return cls(
            n_stages=int(sidecar["n_stages"]),
            bounds=(int(sidecar["c_min"]), int(sidecar["c_max"])),
            n_buckets=int(sidecar["n_buckets"]),
            buckets=buckets,
            n_val=int(sidecar["n_val"]),
            n_g=int(sidecar["n_g"]),
            checkpoint_hash=sidecar.get("checkpoint_hash", ""),
            table=table,
        )


def prior_from_errors(
    errors: np.ndarray,
    table: CostTable,
    n_buckets: int,
    n_g: int,
    checkpoint_hash: str = "",
) -> PriorTable:
    """Frequency estimate of the per-sample optimal path in each budget bucket.

    ``errors[s, k]`` is the error of the path with canonical index ``k`` on
    simulated sample ``s``. For a bucket, the candidates are the ``n_g`` most
    expensive paths feasible at the bucket's lowest budget; each sample votes
    for its lowest-error candidate, ties going to the cheaper path.
    """
    errors = np.asarray(errors, dtype=np.float64)
    n = table.n_stages
    if errors.ndim != 2 or errors.shape[0] < 1:
        raise ValueError("need at least one simulated sample")
    if errors.shape[1] != 2**n:
        raise ValueError(f"error matrix must have {2**n} path columns, got {errors.shape[1]}")
    bounds = cost_bounds(table)
    buckets = {}
    for b in range(n_buckets):
        lo, hi = bucket_range(b, bounds, n_buckets)
        if lo > hi:
            continue
        cands = candidate_set(lo, table, n_g)
        # candidate_set is ordered by descending cost; re-sort cheapest-first so argmin keeps the cheaper path on ties
        cands = sorted(cands, key=lambda p: (path_cost(p, table), p.index))
        cols = errors[:, [p.index for p in cands]]
        winners = np.argmin(cols, axis=1)
        counts = np.bincount(winners, minlength=len(cands))
        probs = {cands[k].index: counts[k] / errors.shape[0] for k in range(len(cands)) if counts[k]}
        buckets[b] = BucketPrior(lo, hi, probs)
    return PriorTable(n, bounds, n_buckets, buckets, errors.shape[0], n_g, checkpoint_hash, table)


def draw_from_prior(prior: PriorTable, budget: int, n_e: int, rng: np.random.Generator) -> list[Path]:
    """Up to ``n_e`` distinct paths, drawn one at a time in proportion to the remaining prior mass."""
    entry = prior.bucket_for(budget)
    indices = sorted(entry.probs)
    mass = np.array([entry.probs[i] for i in indices], dtype=np.float64)
    if mass.sum() <= 0:
        raise ValueError("prior bucket has no support")
    chosen = []
    for _ in range(min(n_e, int((mass > 0).sum()))):
        k = rng.choice(len(indices), p=mass / mass.sum())
        chosen.append(Path.from_index(indices[k], prior.n_stages))
        mass[k] = 0.0
    return chosen


@torch.no_grad()
def evaluate_candidates(model, batch, paths: Sequence[Path], per_sample: bool = False):
    """Unknown-region mean absolute alpha error of each path on ``batch``.

    Returns a list of floats, or with ``per_sample`` a ``(len(paths), B)`` array.
    """
    if not paths:
        raise ValueError("no candidate paths")
    region = unknown_region(batch.trimap)
    out = []
    for path in paths:
        pred = model.forward_path(batch.image, batch.trimap, path)
        err = unknown_l1(pred, batch.alpha, region, per_sample=per_sample)
        out.append(err.double().numpy() if per_sample else float(err))
    return np.stack(out) if per_sample else out


def estimate_prior(model, samples, table: CostTable, n_buckets: int, n_g: int, checkpoint_hash: str = ""):
    """Monte Carlo prior from simulated samples (a sequence of batches or one batch)."""
    batches = list(samples) if isinstance(samples, (list, tuple)) else [samples]
    if not batches or sum(b.image.shape[0] for b in batches) == 0:
        raise ValueError("empty evaluation set")
    paths = enumerate_paths(table.n_stages)
    errors = np.concatenate([evaluate_candidates(model, b, paths, per_sample=True) for b in batches], axis=1)
    return prior_from_errors(errors.T, table, n_buckets, n_g, checkpoint_hash)


@dataclass
class LabelDecision:
    candidates: list[Path]
    errors: list[float]
    network_path: Path
    network_error: float
    network_cost: int
    budget: int
    label: Path
    label_error: float

    @property
    def from_network(self) -> bool:
        return self.label is self.network_path


def generate_label(
    candidates: Sequence[Path],
    errors: Sequence[float],
    network_path: Path,
    network_error: float,
    network_cost: int,
    budget: int,
) -> LabelDecision:
    if not candidates:
        raise ValueError("at least one prior candidate is required")
    if len(candidates) != len(errors):
        raise ValueError("candidates and errors differ in length")
    if not all(math.isfinite(e) for e in (*errors, network_error)):
        raise ValueError("errors must be finite")
    best, best_err = None, math.inf
    if network_cost < budget:
        best, best_err = network_path, network_error
    for path, err in zip(candidates, errors):
        if err < best_err:
            best, best_err = path, err
    return LabelDecision(
        list(candidates), list(errors), network_path, network_error, network_cost, budget, best, best_err
    )
