"""Budget-adaptive image matting with a path-selecting supernet."""
from .pathspace import CostTable, Path, cost_bounds, enumerate_paths, path_cost
from .supernet import Checkpoint, PamSupernet, SupernetConfig, build

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CostTable",
    "PamSupernet",
    "Path",
    "SupernetConfig",
    "build",
    "cost_bounds",
    "enumerate_paths",
    "path_cost",
]
