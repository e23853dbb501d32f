"""Discrete path space of the supernet and an exact FLOP cost model over it.

A path holds one execute/bypass decision per adaptive stage. Its canonical
integer index sets bit ``i`` when stage ``i`` executes.

FLOP convention: 2 FLOPs per multiply-accumulate. Biases, activations,
pooling and interpolation count as zero.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

MAX_STAGES = 20

LAYER_KINDS = ("regular-conv", "depthwise-conv", "pointwise-conv", "pooling", "upsample", "mlp")


@dataclass(frozen=True)
class Path:
    decisions: tuple[int, ...]

    def __post_init__(self):
        if not self.decisions:
            raise ValueError("path must have at least one stage")
        for d in self.decisions:
            if d not in (0, 1):
                raise ValueError(f"path decisions must be 0 or 1, got {d!r}")
        decisions = tuple(int(d) for d in self.decisions)
        object.__setattr__(self, "decisions", decisions)

    @classmethod
    def from_index(cls, index: int, n: int) -> "Path":
        if not 0 <= index < 2**n:
            raise ValueError(f"path index {index} out of range for {n} stages")
        return cls(tuple((index >> i) & 1 for i in range(n)))

    @classmethod
    def from_bits(cls, bits: str) -> "Path":
        return cls(tuple(int(c) for c in bits))

    @classmethod
    def all_execute(cls, n: int) -> "Path":
        return cls((1,) * n)

    @classmethod
    def all_bypass(cls, n: int) -> "Path":
        return cls((0,) * n)

    @property
    def index(self) -> int:
        return sum(d << i for i, d in enumerate(self.decisions))

    @property
    def n_executed(self) -> int:
        return sum(self.decisions)

    def __len__(self) -> int:
        return len(self.decisions)

    def __iter__(self):
        return iter(self.decisions)

    def __getitem__(self, i):
        return self.decisions[i]

    def __str__(self) -> str:
        # stage 0 first; the reverse of how the index would be written in binary
        return "".join(str(d) for d in self.decisions)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_size: int
    in_channels: int
    out_channels: int
    out_height: int
    out_width: int
    stride: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for name in ("kernel_size", "in_channels", "out_channels", "out_height", "out_width", "stride"):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.kind == "depthwise-conv" and self.in_channels != self.out_channels:
            raise ValueError("in_channels: depthwise conv requires in_channels == out_channels")


def layer_flops(spec: LayerSpec) -> int:
    hw = spec.out_height * spec.out_width
    k2 = spec.kernel_size * spec.kernel_size
    if spec.kind == "regular-conv":
        return 2 * k2 * spec.in_channels * spec.out_channels * hw
    if spec.kind == "depthwise-conv":
        return 2 * k2 * spec.in_channels * hw
    if spec.kind == "pointwise-conv":
        return 2 * spec.in_channels * spec.out_channels * hw
    if spec.kind == "mlp":
        return 2 * spec.in_channels * spec.out_channels
    return 0


@dataclass(frozen=True)
class CostTable:
    """Per-component FLOP counts.

    ``fixed`` covers everything that always runs (stem, selection layers,
    pyramid pooling, decoder); ``execute[i]`` / ``bypass[i]`` are the costs
    of stage ``i``'s full block and of its connect layer.
    """

    fixed: int
    execute: tuple[int, ...]
    bypass: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "execute", tuple(self.execute))
        object.__setattr__(self, "bypass", tuple(self.bypass))
        if not self.execute:
            raise ValueError("cost table needs at least one stage")
        if len(self.execute) != len(self.bypass):
            raise ValueError("execute and bypass cost lists differ in length")
        for c in (self.fixed, *self.execute, *self.bypass):
            if not isinstance(c, int) or c < 0:
                raise ValueError(f"costs must be nonnegative integers, got {c!r}")
        for i, (e, b) in enumerate(zip(self.execute, self.bypass)):
            if not b < e:
                raise ValueError(f"stage {i}: bypass cost {b} must be below execute cost {e}")

    @property
    def n_stages(self) -> int:
        return len(self.execute)

    @classmethod
    def from_layers(
        cls,
        fixed: Sequence[LayerSpec],
        execute: Sequence[Sequence[LayerSpec]],
        bypass: Sequence[Sequence[LayerSpec]],
    ) -> "CostTable":
        return cls(
            fixed=sum(layer_flops(s) for s in fixed),
            execute=tuple(sum(layer_flops(s) for s in stage) for stage in execute),
            bypass=tuple(sum(layer_flops(s) for s in stage) for stage in bypass),
        )


def enumerate_paths(n: int) -> list[Path]:
    if not 1 <= n <= MAX_STAGES:
        raise ValueError(f"stage count must lie in [1, {MAX_STAGES}], got {n}")
    return [Path.from_index(i, n) for i in range(2**n)]


def _check_length(path: Path, table: CostTable) -> None:
    if len(path) != table.n_stages:
        raise ValueError(f"path has {len(path)} stages, cost table has {table.n_stages}")


def path_cost(path: Path, table: CostTable) -> int:
    _check_length(path, table)
    return table.fixed + sum(e if d else b for d, e, b in zip(path, table.execute, table.bypass))


def cost_bounds(table: CostTable) -> tuple[int, int]:
    n = table.n_stages
    return path_cost(Path.all_bypass(n), table), path_cost(Path.all_execute(n), table)


def is_feasible(path: Path, table: CostTable, budget: int) -> bool:
    if budget < 0:
        raise ValueError(f"budget must be nonnegative, got {budget}")
    return path_cost(path, table) <= budget


def budget_bucket(budget: int, bounds: tuple[int, int], n_buckets: int) -> int:
    """Round ``budget`` onto one of ``n_buckets`` evenly spaced levels in ``bounds``.

    Integer arithmetic throughout, so the mapping is exact for any budget size.
    """
    c_min, c_max = bounds
    if not c_min <= budget <= c_max:
        raise ValueError(f"budget {budget} outside [{c_min}, {c_max}]")
    span = c_max - c_min
    if span <= 0 or n_buckets < 2:
        return 0
    return (2 * (budget - c_min) * (n_buckets - 1) + span) // (2 * span)


def bucket_range(bucket: int, bounds: tuple[int, int], n_buckets: int) -> tuple[int, int]:
    """Inclusive budget interval mapped to ``bucket`` by :func:`budget_bucket`."""
    c_min, c_max = bounds
    if not 0 <= bucket < n_buckets:
        raise ValueError(f"bucket {bucket} outside [0, {n_buckets})")
    span = c_max - c_min

    def lowest(b):
        if b == 0:
            return c_min
        num = (2 * b - 1) * span
        den = 2 * (n_buckets - 1)
        return c_min + -(-num // den)

    lo = lowest(bucket)
    hi = c_max if bucket == n_buckets - 1 else lowest(bucket + 1) - 1
    return lo, hi
