"""Hybrid hierarchical agent: switching-linear models, discrete planning and LQR control."""

from .agent import AgentConfig, HybridHierarchicalAgent
from .env import EnvConfig, EnvState
from .hybrid_model import FitConfig, HybridSystemParams, Trajectory
from .lqr import LqrConfig, LqrPolicy, LqrProblem
from .planner import DirichletTransitionModel, PlannerConfig

__all__ = [
    "AgentConfig",
    "DirichletTransitionModel",
    "EnvConfig",
    "EnvState",
    "FitConfig",
    "HybridHierarchicalAgent",
    "HybridSystemParams",
    "LqrConfig",
    "LqrPolicy",
    "LqrProblem",
    "PlannerConfig",
    "Trajectory",
]
