"""Stationary mean field games and replicator dynamics on continuous action spaces."""

from .grid import DiscreteMeasure, GridSpec, ValueField, density, make_uniform, mean_action, tv_row_norm
from .stationary import SolveReport, SolverConfig, solve

__all__ = [
    "DiscreteMeasure", "GridSpec", "ValueField", "density", "make_uniform",
    "mean_action", "tv_row_norm", "SolveReport", "SolverConfig", "solve",
]
__version__ = "0.1.0"
