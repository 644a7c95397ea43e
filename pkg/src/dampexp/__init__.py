"""Asymptotic expansions for damped compressible Euler flow with time-decaying damping."""
from .core import (DampexpError, DomainError, HierarchyConstants, Params, PressureLaw,
                   SolverError, XiGrid, hierarchy_constants, k_thresholds, pressure_eval)
from .profiles import WaveProfile, solve_wave

__version__ = "0.1.0"
