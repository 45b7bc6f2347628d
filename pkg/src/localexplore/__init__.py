"""Localized active learning of Gaussian-process state-space models."""

from .gp import GaussianProcess, KernelParams, MultiGP, kernel_eval, train_hyperparameters
from .info import CandidateScore, MIScorer, Region, greedy_batch, most_informative_point
from .explore import ExplorationConfig, MpcConfig, entropy_run, local_run, mpc_solve
from .systems import SYSTEMS, SystemSpec, get_system

__version__ = "0.1.0"

__all__ = [
    "GaussianProcess", "KernelParams", "MultiGP", "kernel_eval", "train_hyperparameters",
    "CandidateScore", "MIScorer", "Region", "greedy_batch", "most_informative_point",
    "ExplorationConfig", "MpcConfig", "entropy_run", "local_run", "mpc_solve",
    "SYSTEMS", "SystemSpec", "get_system",
]
