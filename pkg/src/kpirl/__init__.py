"""Learning keypoint cost functions by differentiating through action optimization."""

from .costs import (DefaultCost, RbfCost, TimeDependentCost, WeightedCost, irl_loss, load_cost, make_cost,
                    save_cost)
from .diffcore import Graph, Node, finite_difference_check, gradient
from .dynamics import GroundTruthModel, KeypointDynamicsRegressor, LearnedModel
from .irl import ApprenticeshipIRL, BilevelIRL, IrlConfig, IrlRecord, apprenticeship_train, train_irl
from .planner import PlanResult, execute_plan, optimize_actions, relative_distance
from .sim_env import ArmConfig, ArmEnv, CameraMap, Demonstration, SystemState

__all__ = [
    "ApprenticeshipIRL", "ArmConfig", "ArmEnv", "BilevelIRL", "CameraMap", "DefaultCost", "Demonstration",
    "Graph", "GroundTruthModel", "IrlConfig", "IrlRecord", "KeypointDynamicsRegressor", "LearnedModel", "Node",
    "PlanResult", "RbfCost", "SystemState", "TimeDependentCost", "WeightedCost", "apprenticeship_train",
    "execute_plan", "finite_difference_check", "gradient", "irl_loss", "load_cost", "make_cost",
    "optimize_actions", "relative_distance", "save_cost", "train_irl",
]

__version__ = "0.1.0"
