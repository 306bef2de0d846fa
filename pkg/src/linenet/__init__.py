"""Throughput, occupancy and delay of finite-buffer erasure line networks."""

from .approx import ApproxSolution, ConvergenceError, FixedPointSolver, NodeChainParams, solve
from .config import ConfigError, NetworkConfig, check_config, state_count, validate
from .delay import DelayEstimator, DelayUndefined, DiscretePMF, total_delay
from .exact import ExactChainResult, ExactChainSolver, solve_exact
from .planner import BufferPlanner, NodeType, allocate, classify, tradeoff_sweep
from .simulate import LineNetworkSimulator, SimReport, SimSettings, replicate, simulate

__version__ = "0.1.0"

__all__ = [
    "ApproxSolution",
    "BufferPlanner",
    "ConfigError",
    "ConvergenceError",
    "DelayEstimator",
    "DelayUndefined",
    "DiscretePMF",
    "ExactChainResult",
    "ExactChainSolver",
    "FixedPointSolver",
    "LineNetworkSimulator",
    "NetworkConfig",
    "NodeChainParams",
    "NodeType",
    "SimReport",
    "SimSettings",
    "allocate",
    "check_config",
    "classify",
    "replicate",
    "simulate",
    "solve",
    "solve_exact",
    "state_count",
    "total_delay",
    "tradeoff_sweep",
    "validate",
]
