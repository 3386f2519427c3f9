from .builder import build_policy, build_policy_hub
from .config import ExperimentConfig, load_config
from .env import DispatchEnv, RewardConfig, run_episode, step
from .evaluation import evaluate_policy, reconfiguration_suite
from .netmodel import NetworkTopology, load_network
from .oracle import OracleConfig, solve_horizon_oracle
from .policy import LoadedPolicy, PolicyHub
from .powerflow import solve_radial
from .td3 import TD3Agent, TD3Config, load_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "DispatchEnv",
    "ExperimentConfig",
    "LoadedPolicy",
    "NetworkTopology",
    "OracleConfig",
    "PolicyHub",
    "RewardConfig",
    "TD3Agent",
    "TD3Config",
    "build_policy",
    "build_policy_hub",
    "evaluate_policy",
    "load_checkpoint",
    "load_config",
    "load_network",
    "reconfiguration_suite",
    "run_episode",
    "solve_horizon_oracle",
    "solve_radial",
    "step",
    "train",
    "__version__",
]
