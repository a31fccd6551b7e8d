"""Allocation planners: static baseline, centralized, decentralized and hierarchical MCTS."""
from .decentralized import DecentralizedPlanner, plan_decentralized
from .hierarchical import HierarchicalPlanner, allocate_counts, region_service_rate
from .mcts import CentralizedPlanner, MCTSConfig, plan_centralized_mcts, search
from .model import ConstantDemand, PlanningModel, ScheduleDemand
from .queueing import action_space_size, erlang_c, estimate_wait
from .static import StaticPlanner, plan_static, weighted_cost

__all__ = [
    "CentralizedPlanner", "ConstantDemand", "DecentralizedPlanner", "HierarchicalPlanner", "MCTSConfig",
    "PlanningModel", "ScheduleDemand", "StaticPlanner", "action_space_size", "allocate_counts", "erlang_c",
    "estimate_wait", "plan_centralized_mcts", "plan_decentralized", "plan_static", "region_service_rate",
    "search", "weighted_cost",
]
