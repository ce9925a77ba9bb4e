"""Quadratic optimal transport, dual potentials and CLT-based inference for
empirical transportation costs."""

from .measures import (DiscreteMeasure, SamplableMeasure, SeedSpec, moment,
                       pairwise_moment_estimates, sample)
from .exact_ot import w2_1d, w2_bruteforce, w2_exact
from .semidiscrete import (SolverConfig, center_potentials, dual_objective, psi_eval,
                           solve_semidiscrete, w2_semidiscrete)

__version__ = "0.1.0"
