"""Benchmark environments."""
from .cartpole import CartPoleEnv, CartPoleTask, cartpole_step
from .dubins import DubinsEnv, DubinsTask, NoSubgoal, WorkspaceConfig, dubins_step, shaped_reward
from .grid import grid_mdp, random_mdp

__all__ = [
    "CartPoleEnv", "CartPoleTask", "cartpole_step",
    "DubinsEnv", "DubinsTask", "NoSubgoal", "WorkspaceConfig", "dubins_step", "shaped_reward",
    "grid_mdp", "random_mdp",
]
