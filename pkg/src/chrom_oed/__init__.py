"""Bayesian optimal design of chromatography experiments.

Forward model: the two-component Equilibrium Dispersive Model with a
competitive Langmuir isotherm, solved by a Koren finite-volume scheme
(:mod:`chrom_oed.edm_solver`) or approximated by a sparse-grid surrogate
(:mod:`chrom_oed.surrogate`).  Expected information gain over the design box
is estimated in :mod:`chrom_oed.oed`; posteriors are sampled with DRAM in
:mod:`chrom_oed.mcmc`.
"""
from .edm_solver import BreakthroughCurve, SolverConfig, SolverError, observe, solve_forward
from .model import (DesignBox, DesignPoint, ModelParams, Observation, ObservationSchedule,
                    ParamBox, langmuir, langmuir_jacobian, log_likelihood)

__version__ = "0.1.0"
