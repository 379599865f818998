"""Instanton-based importance sampling for small-noise diffusions."""
from .bias import BiasControl, CustomControl, InstantonControl, ZeroControl, make_control
from .mc import ImportanceSampler, SimConfig, simulate_batch, simulate_one
from .model import (DiffusionModel, ObservableSpec, TimeGrid, check_theorem_conditions, make_lq_case,
                    make_ou_quartic)
from .odesolve import solve_instanton, solve_riccati
from .stats import EstimatorReport, LogMoments, accumulate, bootstrap_ci, fit_decay_order, report

__all__ = [
    "BiasControl", "CustomControl", "InstantonControl", "ZeroControl", "make_control",
    "ImportanceSampler", "SimConfig", "simulate_batch", "simulate_one",
    "DiffusionModel", "ObservableSpec", "TimeGrid", "check_theorem_conditions", "make_lq_case",
    "make_ou_quartic", "solve_instanton", "solve_riccati",
    "EstimatorReport", "LogMoments", "accumulate", "bootstrap_ci", "fit_decay_order", "report",
]
