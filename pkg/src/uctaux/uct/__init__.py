from .tree import (
    ArmNode,
    Diagnostics,
    SearchConfig,
    StateNode,
    count_nodes,
    expand_leaf,
    plan_episode,
    recommend,
    rollout,
    search,
    select_arm,
    simulate,
)

__all__ = [
    "ArmNode",
    "Diagnostics",
    "SearchConfig",
    "StateNode",
    "count_nodes",
    "expand_leaf",
    "plan_episode",
    "recommend",
    "rollout",
    "search",
    "select_arm",
    "simulate",
]
