"""Constrained portfolio allocation with simplex-decomposed policies.

Allocations are restricted by two linear threshold constraints over subsets of
assets. Every feasible allocation is written as a convex combination of four
points, each drawn from a simplex over a fixed subset of assets, so a policy
can act through four Dirichlet heads and always stay feasible.
"""
from .constraints import (AllocationConstraint, AssetUniverse, ConstraintConfig, Direction,
                          chebyshev_center, generate_random_config, is_feasible, load_configs,
                          save_configs)
from .decomposition import (Decomposition, WeightVector, build_decomposition, compose, compute_weights,
                            decompose, membership)
from .errors import InfeasibleConfigError, InvalidInputError, NumericalError, SimplexAllocError
from .market import (MarketModel, PriceTable, SimulationEnv, fit_hmm, ingest_prices, run_backtest,
                     simulate_nu, synthetic_model, synthetic_prices, to_returns)
from .policy import DecompositionPolicy, EncoderConfig, load_policy, save_policy
from .sampler import UniformPolicy, init_sampler, sample
from .trainer import TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "AllocationConstraint", "AssetUniverse", "ConstraintConfig", "Direction", "chebyshev_center",
    "generate_random_config", "is_feasible", "load_configs", "save_configs",
    "Decomposition", "WeightVector", "build_decomposition", "compose", "compute_weights", "decompose",
    "membership",
    "InfeasibleConfigError", "InvalidInputError", "NumericalError", "SimplexAllocError",
    "MarketModel", "PriceTable", "SimulationEnv", "fit_hmm", "ingest_prices", "run_backtest",
    "simulate_nu", "synthetic_model", "synthetic_prices", "to_returns",
    "DecompositionPolicy", "EncoderConfig", "load_policy", "save_policy",
    "UniformPolicy", "init_sampler", "sample",
    "TrainConfig", "TrainResult", "train",
]
