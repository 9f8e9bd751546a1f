"""Obstacle problems for pure-jump Levy generators with drift.

Characteristic exponents and drift calibration (``levy_core``), path
simulation (``process_sim``), the discretized nonlocal generator
(``generator``), grid and Monte Carlo solvers (``obstacle_solver``) and
regularity diagnostics (``diagnostics``).
"""
__version__ = "0.1.0"

from .errors import (BranchError, CompatibilityError, ConfigError, DegenerateFit, DivergentIntegral,
                     DomainError, EmptyContact, LevyObstacleError, MomentError, NoConvergence,
                     StabilityError, TruncationError)
from .levy_core import (CGMYParams, LevyMeasureSpec, LevyModel, StableParams, VGParams,
                        calibrate_drift, cgmy_model, check_finite_variation, point_mass_model,
                        psi_quadrature, stable_model, vg_model)
from .process_sim import (ProcessSpec, martingale_check, path_moment_diagnostics, simulate_paths)
from .generator import DiscreteGenerator, Extension, OperatorSpec, SampledFunction, symbol_check
from .obstacle_solver import (ObstacleProblemSpec, ValueGrid, american_put, dpp_check, free_boundary,
                              monotonicity_suite, perpetual_put, solve_evolution_grid,
                              solve_evolution_mc, solve_stationary_grid, solve_stationary_mc)
from .diagnostics import RegularityReport, estimate_modulus, fit_exponent, regularity_report

__all__ = [n for n in dir() if not n.startswith("_")]
