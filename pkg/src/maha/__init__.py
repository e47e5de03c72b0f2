"""Multiscale hierarchical attention with optimization-based scale aggregation, in numpy."""
from .aggregate import SolverConfig, co_solve, mean_weights, ne_solve, simplex_project, solve
from .attention import maha_attention
from .errors import ConfigError, DivergenceError, EvaluationError, MahaError, ShapeError
from .hybrid import init_hybrid, maha_layer
from .pyramid import build_pyramid, make_schedule
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DivergenceError",
    "EvaluationError",
    "MahaError",
    "ShapeError",
    "SolverConfig",
    "Tensor",
    "build_pyramid",
    "co_solve",
    "init_hybrid",
    "maha_attention",
    "maha_layer",
    "make_schedule",
    "mean_weights",
    "ne_solve",
    "no_grad",
    "simplex_project",
    "solve",
]
