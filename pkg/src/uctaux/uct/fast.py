"""Compiled UCT engine (numba) for models with integer states.

The control flow and the order of random draws mirror :mod:`uctaux.uct.tree`
line for line, so for the same model and seeds both engines build the same
tree and return bitwise-equal statistics.  The experiment harness uses this
engine; the reference engine is the readable specification it is tested
against.

A model enters the compiled world as a *kernel*: a jitclass exposing

``discount``, ``num_actions(s)``, ``action_at(s, i)``, ``is_terminal(s)``,
``sample(s, a, rng) -> (s', r)``, ``guide(s, g)`` (deterministic heuristic
action ``g``) and ``prior_q(s, a, p)`` (heuristic prior ``p``).

Policies are encoded as ``(kind, guide, p)``: kind 0 is uniform over valid
actions, kind 1 plays guide ``g`` with probability ``p`` and a uniform valid
action otherwise (``p = 1`` is the deterministic guide).
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Any, NamedTuple

import numba as nb
import numpy as np
from numba.experimental import jitclass

from ..mdp import (
    DomainError,
    GreedyPolicy,
    MixturePolicy,
    Policy,
    PriorValue,
    TabularMdp,
    TrialRecord,
    UniformPolicy,
    as_streams,
)
from .tree import Diagnostics, SearchConfig

UNIFORM, GUIDED, NONE = 0, 1, -1


class FastConfig(NamedTuple):
    cp: float
    horizon: int
    budget: int
    prior_id: int
    n_prior: int
    r_kind: int
    r_guide: int
    r_p: float
    aux_kind: int
    aux_guide: int
    aux_p: float
    rec_n: bool


_tree_spec = [
    ("st_state", nb.int64[:]),
    ("st_visits", nb.int64[:]),
    ("st_prior", nb.int64[:]),
    ("st_leafvis", nb.int64[:]),
    ("st_first", nb.int64[:]),
    ("st_narms", nb.int64[:]),
    ("st_sibling", nb.int64[:]),
    ("arm_action", nb.int64[:]),
    ("arm_aux", nb.boolean[:]),
    ("arm_n", nb.int64[:]),
    ("arm_nprior", nb.int64[:]),
    ("arm_q", nb.float64[:]),
    ("arm_child", nb.int64[:]),
    ("n_states", nb.int64),
    ("n_arms", nb.int64),
    ("scratch", nb.int64[:]),
    ("scores", nb.float64[:]),
]


@jitclass(_tree_spec)
class Tree:
    """Flat search tree: state nodes and arm nodes in parallel arrays.

    Children of an arm form a singly linked list through ``st_sibling``.
    """

    def __init__(self, max_states, max_arms, max_width):
        self.st_state = np.empty(max_states, np.int64)
        self.st_visits = np.empty(max_states, np.int64)
        self.st_prior = np.empty(max_states, np.int64)
        self.st_leafvis = np.empty(max_states, np.int64)
        self.st_first = np.empty(max_states, np.int64)
        self.st_narms = np.empty(max_states, np.int64)
        self.st_sibling = np.empty(max_states, np.int64)
        self.arm_action = np.empty(max_arms, np.int64)
        self.arm_aux = np.empty(max_arms, np.bool_)
        self.arm_n = np.empty(max_arms, np.int64)
        self.arm_nprior = np.empty(max_arms, np.int64)
        self.arm_q = np.empty(max_arms, np.float64)
        self.arm_child = np.empty(max_arms, np.int64)
        self.scratch = np.empty(max_width, np.int64)
        self.scores = np.empty(max_width, np.float64)
        self.n_states = 0
        self.n_arms = 0

    def reset(self):
        self.n_states = 0
        self.n_arms = 0

    def new_state(self, s):
        i = self.n_states
        self.st_state[i] = s
        self.st_visits[i] = 0
        self.st_prior[i] = 0
        self.st_leafvis[i] = 0
        self.st_first[i] = -1
        self.st_narms[i] = 0
        self.st_sibling[i] = -1
        self.n_states = i + 1
        return i

    def new_arm(self, action, aux, n, q):
        i = self.n_arms
        self.arm_action[i] = action
        self.arm_aux[i] = aux
        self.arm_n[i] = n
        self.arm_nprior[i] = n
        self.arm_q[i] = q
        self.arm_child[i] = -1
        self.n_arms = i + 1
        return i

    def find_child(self, arm, s):
        c = self.arm_child[arm]
        while c >= 0:
            if self.st_state[c] == s:
                return c
            c = self.st_sibling[c]
        return -1

    def add_child(self, arm, s):
        c = self.new_state(s)
        self.st_sibling[c] = self.arm_child[arm]
        self.arm_child[arm] = c
        return c


@nb.njit
def _pick(tree, count, rng):
    if count == 1:
        return tree.scratch[0]
    return tree.scratch[min(int(rng.random() * count), count - 1)]


@nb.njit
def policy_action(kernel, s, kind, guide, p, rng):
    k = kernel.num_actions(s)
    if kind == UNIFORM:
        return kernel.action_at(s, min(int(rng.random() * k), k - 1))
    g = kernel.guide(s, guide)
    if p >= 1.0:
        return g
    u = rng.random()
    if u < p:
        return g
    return kernel.action_at(s, min(int((u - p) / (1.0 - p) * k), k - 1))


@nb.njit
def rollout(kernel, s, depth, kind, guide, p, rng_model, rng_policy):
    total = 0.0
    weight = 1.0
    for _ in range(depth):
        if kernel.is_terminal(s):
            break
        a = policy_action(kernel, s, kind, guide, p, rng_policy)
        s, r = kernel.sample(s, a, rng_model)
        total += weight * r
        weight *= kernel.discount
    return total


@nb.njit
def select_arm(tree, node, cp, rng):
    first = tree.st_first[node]
    k = tree.st_narms[node]
    count = 0
    for i in range(k):
        if tree.arm_n[first + i] == 0:
            tree.scratch[count] = first + i
            count += 1
    if count > 0:
        return _pick(tree, count, rng)
    log_n = math.log(tree.st_visits[node] + tree.st_prior[node])
    c = 2.0 * cp
    best = -np.inf
    for i in range(k):
        a = first + i
        sc = tree.arm_q[a] + c * math.sqrt(log_n / tree.arm_n[a])
        tree.scores[i] = sc
        if sc > best:
            best = sc
    for i in range(k):
        if tree.scores[i] == best:
            tree.scratch[count] = first + i
            count += 1
    return _pick(tree, count, rng)


@nb.njit
def expand_leaf(kernel, tree, node, cfg):
    s = tree.st_state[node]
    k = kernel.num_actions(s)
    if k == 0:
        raise ValueError("no valid action at non-terminal state")
    first = tree.n_arms
    mass = 0
    for i in range(k):
        a = kernel.action_at(s, i)
        if cfg.prior_id >= 0:
            tree.new_arm(a, False, cfg.n_prior, kernel.prior_q(s, a, cfg.prior_id))
            mass += cfg.n_prior
        else:
            tree.new_arm(a, False, 0, 0.0)
    if cfg.aux_kind == UNIFORM or (cfg.aux_kind == GUIDED and cfg.aux_p < 1.0):
        for i in range(k):
            tree.new_arm(kernel.action_at(s, i), True, 0, 0.0)
    elif cfg.aux_kind == GUIDED:
        tree.new_arm(kernel.guide(s, cfg.aux_guide), True, 0, 0.0)
    tree.st_first[node] = first
    tree.st_narms[node] = tree.n_arms - first
    tree.st_prior[node] = mass
    tree.st_leafvis[node] = tree.st_visits[node]


@nb.njit
def simulate(kernel, tree, root, cfg, rng_model, rng_policy, rng_tie, path_node, path_arm, path_rew):
    gamma = kernel.discount
    node = root
    depth = 0
    fresh = False
    tail = 0.0
    aux_end = False
    plen = 0
    while depth < cfg.horizon and not kernel.is_terminal(tree.st_state[node]):
        s = tree.st_state[node]
        if fresh:
            tail = rollout(kernel, s, cfg.horizon - depth, cfg.r_kind, cfg.r_guide, cfg.r_p, rng_model, rng_policy)
            break
        if tree.st_first[node] < 0:
            expand_leaf(kernel, tree, node, cfg)
        arm = select_arm(tree, node, cfg.cp, rng_tie)
        nxt, r = kernel.sample(s, tree.arm_action[arm], rng_model)
        path_node[plen] = node
        path_arm[plen] = arm
        path_rew[plen] = r
        plen += 1
        if tree.arm_aux[arm]:
            tail = rollout(
                kernel, nxt, cfg.horizon - depth - 1, cfg.aux_kind, cfg.aux_guide, cfg.aux_p, rng_model, rng_policy
            )
            aux_end = True
            break
        child = tree.find_child(arm, nxt)
        fresh = child < 0
        if fresh:
            child = tree.add_child(arm, nxt)
        node = child
        depth += 1
    if not aux_end:
        tree.st_visits[node] += 1
    ret = tail
    for i in range(plen - 1, -1, -1):
        ret = path_rew[i] + gamma * ret
        a = path_arm[i]
        tree.arm_n[a] += 1
        tree.arm_q[a] += (ret - tree.arm_q[a]) / tree.arm_n[a]
        tree.st_visits[path_node[i]] += 1
    return ret


@nb.njit
def recommend(tree, root, rec_n, rng):
    first = tree.st_first[root]
    k = tree.st_narms[root]
    any_visited = False
    for i in range(k):
        if tree.arm_n[first + i] > 0:
            any_visited = True
    best = -np.inf
    for i in range(k):
        a = first + i
        if any_visited and tree.arm_n[a] == 0:
            continue
        key = float(tree.arm_n[a]) if rec_n else tree.arm_q[a]
        if key > best:
            best = key
    count = 0
    for i in range(k):
        a = first + i
        if any_visited and tree.arm_n[a] == 0:
            continue
        key = float(tree.arm_n[a]) if rec_n else tree.arm_q[a]
        if key == best:
            tree.scratch[count] = a
            count += 1
    return _pick(tree, count, rng)


@nb.njit
def run_search(kernel, tree, start, cfg, rng_model, rng_policy, rng_tie):
    """Returns the recommended root arm index; the tree keeps all statistics."""
    tree.reset()
    root = tree.new_state(start)
    path_node = np.empty(cfg.horizon + 1, np.int64)
    path_arm = np.empty(cfg.horizon + 1, np.int64)
    path_rew = np.empty(cfg.horizon + 1, np.float64)
    for _ in range(cfg.budget):
        simulate(kernel, tree, root, cfg, rng_model, rng_policy, rng_tie, path_node, path_arm, path_rew)
    return recommend(tree, root, cfg.rec_n, rng_tie)


@nb.njit
def run_episode(kernel, tree, start, cfg, max_steps, rng_model, rng_policy, rng_tie, rng_env):
    s = start
    total = 0.0
    weight = 1.0
    steps = 0
    nodes = 0
    while steps < max_steps and not kernel.is_terminal(s):
        arm = run_search(kernel, tree, s, cfg, rng_model, rng_policy, rng_tie)
        nodes += tree.n_states + tree.n_arms
        s, r = kernel.sample(s, tree.arm_action[arm], rng_env)
        total += weight * r
        weight *= kernel.discount
        steps += 1
    return total, steps, nodes


@nb.njit
def run_policy_kernel(kernel, start, horizon, kind, guide, p, rng_model, rng_policy):
    s = start
    total = 0.0
    weight = 1.0
    steps = 0
    while steps < horizon and not kernel.is_terminal(s):
        a = policy_action(kernel, s, kind, guide, p, rng_policy)
        s, r = kernel.sample(s, a, rng_model)
        total += weight * r
        weight *= kernel.discount
        steps += 1
    return total, steps


# -- tabular kernel --------------------------------------------------------------


_tabular_spec = [
    ("indptr", nb.int64[:]),
    ("next_states", nb.int32[:]),
    ("probs", nb.float64[:]),
    ("rewards", nb.float64[:]),
    ("act_ptr", nb.int64[:]),
    ("act_list", nb.int64[:]),
    ("terminal", nb.boolean[:]),
    ("guides", nb.int64[:, :]),
    ("priors", nb.float64[:, :, :]),
    ("n_actions", nb.int64),
    ("discount", nb.float64),
]


@jitclass(_tabular_spec)
class TabularKernel:
    def __init__(self, indptr, next_states, probs, rewards, act_ptr, act_list, terminal, guides, priors, n_actions, discount):
        self.indptr = indptr
        self.next_states = next_states
        self.probs = probs
        self.rewards = rewards
        self.act_ptr = act_ptr
        self.act_list = act_list
        self.terminal = terminal
        self.guides = guides
        self.priors = priors
        self.n_actions = n_actions
        self.discount = discount

    def num_actions(self, s):
        return self.act_ptr[s + 1] - self.act_ptr[s]

    def action_at(self, s, i):
        return self.act_list[self.act_ptr[s] + i]

    def is_terminal(self, s):
        return self.terminal[s]

    def guide(self, s, g):
        return self.guides[g, s]

    def prior_q(self, s, a, p):
        return self.priors[p, s, a]

    def sample(self, s, a, rng):
        row = s * self.n_actions + a
        lo = self.indptr[row]
        hi = self.indptr[row + 1]
        u = rng.random()
        acc = 0.0
        k = lo
        while k < hi - 1:
            acc += self.probs[k]
            if u < acc:
                break
            k += 1
        return np.int64(self.next_states[k]), self.rewards[k]


# -- Python-facing wrappers ------------------------------------------------------


@dataclass
class FastModel:
    """A compiled kernel plus the names of the guides and priors it carries."""

    kernel: Any
    max_actions: int
    guides: dict[str, int] = field(default_factory=dict)
    priors: dict[str, int] = field(default_factory=dict)

    def encode_policy(self, policy: Policy | None) -> tuple[int, int, float]:
        if policy is None:
            return NONE, -1, 0.0
        if isinstance(policy, UniformPolicy):
            return UNIFORM, -1, 0.0
        if isinstance(policy, MixturePolicy):
            return GUIDED, self._guide_id(policy.base), float(policy.p)
        if isinstance(policy, GreedyPolicy):
            return GUIDED, self._guide_id(policy), 1.0
        raise TypeError(f"the compiled engine cannot run {policy!r}")

    def _guide_id(self, policy: GreedyPolicy) -> int:
        try:
            return self.guides[policy.name]
        except KeyError:
            raise KeyError(f"kernel has no guide named {policy.name!r}; known: {sorted(self.guides)}") from None

    def encode(self, config: SearchConfig) -> FastConfig:
        prior_id, n_prior = -1, 0
        if config.prior is not None:
            name = getattr(config.prior, "name", "prior")
            if name not in self.priors:
                raise KeyError(f"kernel has no prior named {name!r}; known: {sorted(self.priors)}")
            prior_id, n_prior = self.priors[name], config.prior.n
        r = self.encode_policy(config.rollout_policy)
        x = self.encode_policy(config.aux_policy)
        return FastConfig(
            float(config.exploration), int(config.horizon), int(config.budget), prior_id, int(n_prior),
            r[0], r[1], r[2], x[0], x[1], x[2], config.recommend == "n",
        )

    def make_tree(self, budget: int) -> Tree:
        width = 2 * self.max_actions
        return Tree(budget + 1, (budget + 1) * width, width)


def tabular_kernel(
    mdp: TabularMdp,
    guides: dict[str, np.ndarray] | None = None,
    priors: dict[str, np.ndarray] | None = None,
) -> FastModel:
    """Compile a tabular MDP with named guide tables (S,) and prior tables (S, A)."""
    guides = guides or {}
    priors = priors or {}
    ptr, flat = mdp.action_lists
    g, p = stack_tables(guides, priors)
    kernel = TabularKernel(
        mdp.indptr, mdp.next_states, mdp.probs, mdp.rewards, ptr, flat, mdp.terminal, g, p,
        mdp.n_actions, float(mdp.discount),
    )
    return FastModel(
        kernel,
        max_actions=mdp.n_actions,
        guides={k: i for i, k in enumerate(guides)},
        priors={k: i for i, k in enumerate(priors)},
    )


def config_tables(config: SearchConfig) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Named guide and prior tables carried by a config's policies and prior."""
    guides: dict[str, np.ndarray] = {}
    for pol in (config.rollout_policy, config.aux_policy):
        base = pol.base if isinstance(pol, MixturePolicy) else pol
        if isinstance(base, GreedyPolicy):
            if base.table is None:
                raise ValueError(f"{base!r} has no table for the compiled engine")
            guides[base.name] = base.table
    priors = {}
    if config.prior is not None:
        if config.prior.table is None:
            raise ValueError("prior has no table for the compiled engine")
        priors[config.prior.name] = config.prior.table
    return guides, priors


def stack_tables(guides: dict[str, np.ndarray], priors: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    g = np.stack([np.asarray(t, np.int64) for t in guides.values()]) if guides else np.zeros((1, 1), np.int64)
    p = np.stack([np.asarray(t, np.float64) for t in priors.values()]) if priors else np.zeros((1, 1, 1))
    return np.ascontiguousarray(g), np.ascontiguousarray(p)


def tabular_kernel_for(mdp: TabularMdp, config: SearchConfig) -> FastModel:
    """Compile ``mdp`` with whatever tables the config's policies and prior carry."""
    return tabular_kernel(mdp, *config_tables(config))


def _diagnostics(tree: Tree, arm: int, budget: int) -> Diagnostics:
    first, k = tree.st_first[0], tree.st_narms[0]
    sl = slice(first, first + k)
    root_arms = list(
        zip(tree.arm_action[sl].tolist(), tree.arm_aux[sl].tolist(), tree.arm_n[sl].tolist(), tree.arm_q[sl].tolist())
    )
    return Diagnostics(
        action=int(tree.arm_action[arm]),
        aux=bool(tree.arm_aux[arm]),
        tree_nodes=int(tree.n_states + tree.n_arms),
        rollouts=budget,
        root_arms=root_arms,
    )


def fast_search(fm: FastModel, start: int, config: SearchConfig, rng, tree: Tree | None = None):
    """Compiled counterpart of :func:`uctaux.uct.search`."""
    if fm.kernel.is_terminal(start):
        raise DomainError("cannot search from a terminal state")
    rng = as_streams(rng)
    cfg = fm.encode(config)
    tree = tree or fm.make_tree(config.budget)
    arm = run_search(fm.kernel, tree, np.int64(start), cfg, rng.model, rng.policy, rng.tie)
    return int(tree.arm_action[arm]), _diagnostics(tree, arm, config.budget)


def fast_plan_episode(fm: FastModel, start: int, config: SearchConfig, max_steps: int, rng, tree: Tree | None = None) -> TrialRecord:
    """Compiled counterpart of :func:`uctaux.uct.plan_episode`."""
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    rng = as_streams(rng)
    cfg = fm.encode(config)
    tree = tree or fm.make_tree(config.budget)
    t0 = time.perf_counter()
    ret, steps, nodes = run_episode(fm.kernel, tree, np.int64(start), cfg, max_steps, rng.model, rng.policy, rng.tie, rng.env)
    return TrialRecord(
        ret=ret,
        steps=steps,
        tree_nodes=nodes / steps if steps else 0.0,
        total_nodes=nodes,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
    )


def fast_run_policy(fm: FastModel, policy: Policy, start: int, horizon: int, rng) -> tuple[float, int]:
    """Compiled counterpart of :func:`uctaux.mdp.run_policy` for encodable policies."""
    rng = as_streams(rng)
    kind, guide, p = fm.encode_policy(policy)
    return run_policy_kernel(fm.kernel, np.int64(start), horizon, kind, guide, p, rng.model, rng.policy)
