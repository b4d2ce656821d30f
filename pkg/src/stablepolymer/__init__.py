"""Directed polymers driven by symmetric stable processes in a Poisson environment.

The package simulates the normalized partition functions of the polymer under
intermediate-disorder scalings and compares them with the chaos solution of
the fractional stochastic heat equation.
"""

__version__ = "0.1.0"

from .stable_process import StableParams, build_density_grid, density, cdf, sample_paths, sample_bridges  # noqa: E402
from .polymer import PolymerConfig, Schedule, estimate_W, sample_W_pairs  # noqa: E402
from .she_solver import SheConfig, chaos_point_to_line, duhamel_solve, second_moment_series  # noqa: E402

__all__ = [
    "StableParams",
    "build_density_grid",
    "density",
    "cdf",
    "sample_paths",
    "sample_bridges",
    "PolymerConfig",
    "Schedule",
    "estimate_W",
    "sample_W_pairs",
    "SheConfig",
    "chaos_point_to_line",
    "duhamel_solve",
    "second_moment_series",
]
