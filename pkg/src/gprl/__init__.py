"""Interpretable policies by genetic programming on learned world models.

Modules: ``expr`` (typed expression trees), ``genetics`` (the evolutionary
loop and Pareto archive), ``envs`` (mountain car and cart-pole dynamics),
``worldmodel`` (per-variable neural transition models), ``rl`` (returns,
fitness, teacher and imitation baseline) and ``cli``.
"""

__version__ = "0.1.0"

from .envs import CartPole, MountainCar, make_env  # noqa: E402
from .expr import (  # noqa: E402
    ExpressionTree, Policy, auto_cancel, complexity_of, eval_tree, format_tree, grow, parse_tree,
)
from .genetics import GAConfig, ParetoArchive, run_gprl, squash_fronts  # noqa: E402
from .rl import RolloutConfig, discount_for, fitness, rollout_return  # noqa: E402
from .worldmodel import TransitionDataset, WorldModel, build_world_model  # noqa: E402

__all__ = [
    "CartPole", "MountainCar", "make_env",
    "ExpressionTree", "Policy", "auto_cancel", "complexity_of", "eval_tree", "format_tree",
    "grow", "parse_tree",
    "GAConfig", "ParetoArchive", "run_gprl", "squash_fronts",
    "RolloutConfig", "discount_for", "fitness", "rollout_return",
    "TransitionDataset", "WorldModel", "build_world_model",
]
