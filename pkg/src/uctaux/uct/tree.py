"""Reference UCT engine over any :class:`~uctaux.mdp.GenerativeModel`.

One engine covers every bootstrapping variant through three hooks on
:class:`SearchConfig`:

``prior``           new ordinary arms start at ``(n_prior, Q_prior)`` (UCT-I)
``rollout_policy``  replaces uniform random rollouts (UCT-S)
``aux_policy``      adds one auxiliary arm per supported action (UCT-Aux)

With every hook at its default the engine is plain UCT.  Random draws are
taken from fixed streams in a fixed order so the compiled twin in
:mod:`uctaux.uct.fast` reproduces this engine bit for bit.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from ..mdp import (
    DomainError,
    GenerativeModel,
    Policy,
    PriorValue,
    State,
    Streams,
    TrialRecord,
    UniformPolicy,
    as_streams,
)


@dataclass(frozen=True)
class SearchConfig:
    exploration: float
    horizon: int
    budget: int
    prior: PriorValue | None = None
    rollout_policy: Policy = field(default_factory=UniformPolicy)
    aux_policy: Policy | None = None
    recommend: str = "q"  # "q" or "n"

    def __post_init__(self):
        if self.exploration <= 0:
            raise ValueError("exploration constant must be positive")
        if self.horizon < 1 or self.budget < 1:
            raise ValueError("horizon and budget must be at least 1")
        if self.recommend not in ("q", "n"):
            raise ValueError(f"unknown recommendation rule {self.recommend!r}")


@dataclass(eq=False)
class ArmNode:
    action: Any
    aux: bool = False
    n: int = 0
    q: float = 0.0
    n_prior: int = 0
    children: dict = field(default_factory=dict)


@dataclass(eq=False)
class StateNode:
    state: Any
    visits: int = 0
    prior_mass: int = 0
    leaf_visits: int = 0
    arms: list[ArmNode] | None = None

    @property
    def is_leaf(self) -> bool:
        return self.arms is None

    @property
    def n(self) -> int:
        """Visit count used by the bandit: real visits plus prior mass."""
        return self.visits + self.prior_mass


@dataclass
class Diagnostics:
    action: Any
    aux: bool
    tree_nodes: int
    rollouts: int
    root_arms: list[tuple[Any, bool, int, float]]


def _pick(indices: list[int], rng: np.random.Generator) -> int:
    if len(indices) == 1:
        return indices[0]
    return indices[min(int(rng.random() * len(indices)), len(indices) - 1)]


def select_arm(node: StateNode, config: SearchConfig, rng: np.random.Generator) -> ArmNode:
    """UCB1 selection; unvisited arms are played first, ties broken uniformly."""
    arms = node.arms
    fresh = [i for i, arm in enumerate(arms) if arm.n == 0]
    if fresh:
        return arms[_pick(fresh, rng)]
    log_n = math.log(node.n)
    c = 2.0 * config.exploration
    scores = [arm.q + c * math.sqrt(log_n / arm.n) for arm in arms]
    best = max(scores)
    return arms[_pick([i for i, s in enumerate(scores) if s == best], rng)]


def expand_leaf(node: StateNode, model: GenerativeModel, config: SearchConfig) -> None:
    actions = model.actions(node.state)
    if not actions:
        raise DomainError(f"no valid action at non-terminal state {node.state!r}")
    arms = []
    prior = config.prior
    for a in actions:
        if prior is not None:
            arms.append(ArmNode(a, n=prior.n, q=prior.q(node.state, a), n_prior=prior.n))
        else:
            arms.append(ArmNode(a))
    if config.aux_policy is not None:
        arms.extend(ArmNode(a, aux=True) for a in config.aux_policy.support(node.state, actions))
    node.arms = arms
    node.prior_mass = sum(arm.n_prior for arm in arms)
    node.leaf_visits = node.visits


def rollout(state: State, depth: int, policy: Policy, model: GenerativeModel, rng: Streams) -> float:
    """Discounted return of ``policy`` from ``state`` over at most ``depth`` steps."""
    total, weight = 0.0, 1.0
    for _ in range(depth):
        if model.is_terminal(state):
            break
        actions = model.actions(state)
        a = policy.sample(state, actions, rng.policy)
        state, r = model.sample(state, a, rng.model)
        total += weight * r
        weight *= model.discount
    return total


def simulate(
    root: StateNode,
    model: GenerativeModel,
    config: SearchConfig,
    rng: Streams,
    trace: list | None = None,
) -> float:
    """Run one rollout from ``root`` and back its return up the traversed arms.

    Nodes created during this rollout are left as leaves and the rollout
    policy takes over from them; a leaf reached on a later rollout is
    expanded and searched through.  Picking an auxiliary arm plays its label
    and then hands the rest of the episode to the auxiliary policy.
    """
    gamma = model.discount
    path: list[tuple[StateNode, ArmNode, float]] = []
    node, depth, fresh = root, 0, False
    tail = 0.0
    ended_at_aux = False
    while depth < config.horizon and not model.is_terminal(node.state):
        if fresh:
            tail = rollout(node.state, config.horizon - depth, config.rollout_policy, model, rng)
            break
        if node.is_leaf:
            expand_leaf(node, model, config)
        arm = select_arm(node, config, rng.tie)
        nxt, r = model.sample(node.state, arm.action, rng.model)
        path.append((node, arm, r))
        if trace is not None:
            trace.append((depth, arm.action, arm.aux, nxt))
        if arm.aux:
            tail = rollout(nxt, config.horizon - depth - 1, config.aux_policy, model, rng)
            ended_at_aux = True
            break
        child = arm.children.get(nxt)
        fresh = child is None
        if fresh:
            child = arm.children[nxt] = StateNode(nxt)
        node = child
        depth += 1
    if not ended_at_aux:
        node.visits += 1
    ret = tail
    for n_, arm, r in reversed(path):
        ret = r + gamma * ret
        arm.n += 1
        arm.q += (ret - arm.q) / arm.n
        n_.visits += 1
    return ret


def count_nodes(root: StateNode) -> int:
    """State nodes plus arm nodes."""
    total, stack = 0, [root]
    while stack:
        node = stack.pop()
        total += 1
        for arm in node.arms or ():
            total += 1
            stack.extend(arm.children.values())
    return total


def recommend(root: StateNode, rule: str, rng: np.random.Generator) -> ArmNode:
    """Root arm with highest Q (or n) among arms that carry any visits."""
    arms = [a for a in root.arms if a.n > 0] or root.arms
    key = (lambda a: a.q) if rule == "q" else (lambda a: a.n)
    best = max(key(a) for a in arms)
    tied = [i for i, a in enumerate(arms) if key(a) == best]
    return arms[_pick(tied, rng)]


def search(
    model: GenerativeModel,
    start: State,
    config: SearchConfig,
    rng,
    trace: list | None = None,
    return_tree: bool = False,
):
    """Run ``config.budget`` rollouts from ``start``; return ``(action, Diagnostics)``.

    With ``return_tree`` the root node is appended to the result.
    """
    if model.is_terminal(start):
        raise DomainError("cannot search from a terminal state")
    rng = as_streams(rng)
    root = StateNode(start)
    for _ in range(config.budget):
        simulate(root, model, config, rng, trace)
    best = recommend(root, config.recommend, rng.tie)
    diag = Diagnostics(
        action=best.action,
        aux=best.aux,
        tree_nodes=count_nodes(root),
        rollouts=config.budget,
        root_arms=[(a.action, a.aux, a.n, a.q) for a in root.arms],
    )
    if return_tree:
        return best.action, diag, root
    return best.action, diag


def plan_episode(
    model: GenerativeModel,
    start: State,
    config: SearchConfig,
    max_steps: int,
    rng,
    search_fn: Callable | None = None,
) -> TrialRecord:
    """Replan from scratch at every step and act in the environment until terminal or ``max_steps``."""
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    rng = as_streams(rng)
    search_fn = search_fn or search
    t0 = time.perf_counter()
    state, total, weight, steps, nodes = start, 0.0, 1.0, 0, 0
    while steps < max_steps and not model.is_terminal(state):
        action, diag = search_fn(model, state, config, rng)
        nodes += diag.tree_nodes
        state, r = model.sample(state, action, rng.env)
        total += weight * r
        weight *= model.discount
        steps += 1
    return TrialRecord(
        ret=total,
        steps=steps,
        tree_nodes=nodes / steps if steps else 0.0,
        total_nodes=nodes,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
    )
