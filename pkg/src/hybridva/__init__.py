"""Pricing and optimal withdrawal analysis for a GMWB variable annuity with
optional ratchet, cash fund and taxation."""

__version__ = "0.1.0"

from .contract import ContractError, ContractSpec, ContractState, MarketParams
from .pde import GridConfig, GridSpec, build_grid, step_period
from .dp import Mode, PolicySurface, SolveResult, apply_jump, value_contract
from .calibrate import FeeResult, FeeStatus, FeeSweep, fair_fee
from .simulate import PathBatch, ScenarioStats, policy_ratio_export, run_policy, simulate_paths

__all__ = [
    "ContractError", "ContractSpec", "ContractState", "MarketParams",
    "GridConfig", "GridSpec", "build_grid", "step_period",
    "Mode", "PolicySurface", "SolveResult", "apply_jump", "value_contract",
    "FeeResult", "FeeStatus", "FeeSweep", "fair_fee",
    "PathBatch", "ScenarioStats", "policy_ratio_export", "run_policy", "simulate_paths",
]
