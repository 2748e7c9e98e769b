"""MDP abstractions shared by the solver, the search engines and the domains.

Two views of a planning problem live here:

* :class:`GenerativeModel` -- the sampling-only contract UCT consumes.
* :class:`TabularMdp` -- a fully enumerated model stored as a successor list
  (one CSR row per state-action pair), used by value iteration and by the
  compiled search kernels.

Rewards are maximised everywhere; domains with costs encode them as negative
rewards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Hashable, NamedTuple, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

State = Hashable
Action = Hashable


class DomainError(ValueError):
    """A model or policy was asked to do something its domain forbids."""


class GenerativeModel(Protocol):
    discount: float

    def actions(self, state: State) -> Sequence[Action]:
        ...

    def sample(self, state: State, action: Action, rng: np.random.Generator) -> tuple[State, float]:
        ...

    def is_terminal(self, state: State) -> bool:
        ...


class Streams(NamedTuple):
    """Independent random streams owned by one trial.

    ``model`` drives the simulator inside search, ``policy`` drives rollout
    and auxiliary policies, ``tie`` breaks ties between arms and ``env``
    drives the real environment in :func:`~uctaux.uct.plan_episode`.
    """

    model: np.random.Generator
    policy: np.random.Generator
    tie: np.random.Generator
    env: np.random.Generator


def make_streams(seed: int | np.random.SeedSequence) -> Streams:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return Streams(*(np.random.default_rng(s) for s in ss.spawn(4)))


def as_streams(rng: Streams | np.random.Generator | int | None) -> Streams:
    """Coerce a seed, a single generator or a stream bundle into :class:`Streams`.

    A single generator is shared by every component, which keeps calls
    reproducible but couples the components' draws.
    """
    if isinstance(rng, Streams):
        return rng
    if isinstance(rng, np.random.Generator):
        return Streams(rng, rng, rng, rng)
    return make_streams(0 if rng is None else rng)


# -- policies -----------------------------------------------------------------


def pick_uniform(actions: Sequence[Action], u: float) -> Action:
    k = len(actions)
    return actions[min(int(u * k), k - 1)]


class Policy:
    """Possibly stochastic map from a state to a distribution over actions.

    ``actions`` is always the model's valid-action list at ``state``; policies
    that ignore it must still only put mass on members of it.
    """

    def distribution(self, state: State, actions: Sequence[Action]) -> list[tuple[Action, float]]:
        raise NotImplementedError

    def sample(self, state: State, actions: Sequence[Action], rng: np.random.Generator) -> Action:
        u = rng.random()
        acc = 0.0
        dist = self.distribution(state, actions)
        for a, p in dist[:-1]:
            acc += p
            if u < acc:
                return a
        return dist[-1][0]

    def support(self, state: State, actions: Sequence[Action]) -> list[Action]:
        """Actions with positive probability; their count is kappa(s)."""
        return [a for a, p in self.distribution(state, actions) if p > 0.0]


class UniformPolicy(Policy):
    def distribution(self, state, actions):
        p = 1.0 / len(actions)
        return [(a, p) for a in actions]

    def sample(self, state, actions, rng):
        return pick_uniform(actions, rng.random())

    def __repr__(self) -> str:
        return "UniformPolicy()"


class GreedyPolicy(Policy):
    """Deterministic policy given by a chooser function.

    ``table`` optionally holds the same policy as an action index per state
    index; the compiled search kernels read it instead of calling ``choose``.
    """

    def __init__(self, choose: Callable[[State], Action], table: np.ndarray | None = None, name: str = "greedy"):
        self.choose = choose
        self.table = table
        self.name = name

    @classmethod
    def from_table(cls, table: np.ndarray, name: str = "greedy") -> GreedyPolicy:
        table = np.asarray(table, dtype=np.int64)
        return cls(lambda s: int(table[s]), table=table, name=name)

    def distribution(self, state, actions):
        return [(self.choose(state), 1.0)]

    def sample(self, state, actions, rng):
        return self.choose(state)

    def __repr__(self) -> str:
        return f"GreedyPolicy({self.name})"


class MixturePolicy(Policy):
    """Play ``base`` with probability ``p`` and a uniform valid action otherwise.

    The base action can also come out of the uniform share, so its total
    probability is ``p + (1 - p) / |A(s)|``.
    """

    def __init__(self, base: GreedyPolicy, p: float):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"mixture weight must lie in [0, 1], got {p}")
        self.base = base
        self.p = p

    @property
    def table(self) -> np.ndarray | None:
        return self.base.table

    def distribution(self, state, actions):
        g = self.base.choose(state)
        share = (1.0 - self.p) / len(actions)
        return [(a, share + (self.p if a == g else 0.0)) for a in actions]

    def sample(self, state, actions, rng):
        if self.p >= 1.0:
            return self.base.choose(state)
        u = rng.random()
        if u < self.p:
            return self.base.choose(state)
        return pick_uniform(actions, (u - self.p) / (1.0 - self.p))

    def __repr__(self) -> str:
        return f"MixturePolicy({self.base!r}, p={self.p})"


class TabularPolicy(Policy):
    """Explicit per-state action distributions, e.g. ``{s: [(a, p), ...]}``."""

    def __init__(self, table: dict[State, list[tuple[Action, float]]]):
        for s, dist in table.items():
            check_distribution(dist)
        self.table = table

    def distribution(self, state, actions):
        return self.table[state]


def check_distribution(dist: Sequence[tuple[Action, float]], tol: float = 1e-9) -> None:
    probs = [p for _, p in dist]
    if not probs or min(probs) < 0.0 or abs(math.fsum(probs) - 1.0) > tol:
        raise DomainError(f"not a probability distribution: {dist!r}")


@dataclass(frozen=True)
class PriorValue:
    """Heuristic initialisation ``(n_prior, Q_prior)`` for new arms."""

    q: Callable[[State, Action], float]
    n: int = 1
    table: np.ndarray | None = None
    name: str = "prior"

    @classmethod
    def from_table(cls, table: np.ndarray, n: int = 1, name: str = "prior") -> PriorValue:
        table = np.asarray(table, dtype=np.float64)
        return cls(lambda s, a: float(table[s, a]), n=n, table=table, name=name)

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n_prior must be nonnegative")


# -- returns and policy simulation ------------------------------------------


def discounted_return(rewards: Sequence[float], discount: float) -> float:
    total = 0.0
    weight = 1.0
    for r in rewards:
        total += weight * r
        weight *= discount
    return total


def run_policy(model: GenerativeModel, policy: Policy, start: State, horizon: int, rng) -> tuple[float, int]:
    """Simulate ``policy`` for at most ``horizon`` steps; return (discounted return, steps)."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    rng = as_streams(rng)
    state = start
    total, weight, steps = 0.0, 1.0, 0
    while steps < horizon and not model.is_terminal(state):
        actions = model.actions(state)
        a = policy.sample(state, actions, rng.policy)
        if a not in actions:
            raise DomainError(f"policy chose {a!r}, invalid at {state!r}")
        state, r = model.sample(state, a, rng.model)
        total += weight * r
        weight *= model.discount
        steps += 1
    return total, steps


@dataclass
class TrialRecord:
    """One (agent, instance, trial, budget) episode."""

    agent: str = ""
    instance: int = 0
    trial: int = 0
    budget: int = 0
    ret: float = 0.0
    steps: int = 0
    tree_nodes: float = 0.0
    wall_ms: float = 0.0
    total_nodes: int = 0
    error: str | None = None


# -- tabular MDPs ---------------------------------------------------------------


@dataclass(eq=False)
class TabularMdp:
    """Enumerated MDP stored as successor lists.

    Row ``s * n_actions + a`` of the CSR triple (``indptr``, ``next_states``,
    ``probs``/``rewards``) lists the outcomes of action ``a`` in state ``s``.
    Rows of invalid pairs and of terminal states are empty.
    """

    n_states: int
    n_actions: int
    indptr: np.ndarray
    next_states: np.ndarray
    probs: np.ndarray
    rewards: np.ndarray
    action_mask: np.ndarray
    terminal: np.ndarray
    discount: float
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.indptr = np.asarray(self.indptr, dtype=np.int64)
        self.next_states = np.asarray(self.next_states, dtype=np.int32)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.action_mask = np.asarray(self.action_mask, dtype=bool)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        if self.indptr.shape != (self.n_states * self.n_actions + 1,):
            raise ValueError("indptr must have n_states * n_actions + 1 entries")

    @classmethod
    def from_outcomes(
        cls,
        n_states: int,
        n_actions: int,
        outcomes: dict[tuple[int, int], list[tuple[int, float, float]]],
        discount: float,
        terminal: Sequence[int] = (),
    ) -> TabularMdp:
        """Build from ``{(s, a): [(s', prob, reward), ...]}``; convenient for small hand-made MDPs."""
        counts = np.zeros(n_states * n_actions, dtype=np.int64)
        mask = np.zeros((n_states, n_actions), dtype=bool)
        for (s, a), outs in outcomes.items():
            counts[s * n_actions + a] = len(outs)
            mask[s, a] = True
        indptr = np.concatenate([[0], np.cumsum(counts)])
        nxt = np.zeros(indptr[-1], dtype=np.int32)
        pr = np.zeros(indptr[-1])
        rw = np.zeros(indptr[-1])
        for (s, a), outs in outcomes.items():
            lo = indptr[s * n_actions + a]
            for k, (s2, p, r) in enumerate(outs):
                nxt[lo + k], pr[lo + k], rw[lo + k] = s2, p, r
        term = np.zeros(n_states, dtype=bool)
        term[list(terminal)] = True
        mask[term] = False
        return cls(n_states, n_actions, indptr, nxt, pr, rw, mask, term, discount)

    def check(self, tol: float = 1e-9) -> None:
        """Raise :class:`DomainError` unless every valid row is a distribution."""
        if np.any(self.probs < 0.0) or np.any(self.probs > 1.0):
            raise DomainError("probabilities outside [0, 1]")
        counts = np.diff(self.indptr)
        rows = np.repeat(np.arange(counts.size), counts)
        sums = np.bincount(rows, weights=self.probs, minlength=counts.size)
        valid = self.action_mask.ravel()
        bad = np.flatnonzero((np.abs(sums - 1.0) > tol) & valid)
        if bad.size:
            raise DomainError(f"row {divmod(int(bad[0]), self.n_actions)} does not sum to 1")
        if np.any(counts[~valid] > 0):
            raise DomainError("invalid state-action pair carries transitions")
        if np.any(self.action_mask[self.terminal]):
            raise DomainError("terminal state with valid actions")

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """Transition operator of shape (n_states * n_actions, n_states)."""
        return sp.csr_matrix(
            (self.probs, self.next_states, self.indptr),
            shape=(self.n_states * self.n_actions, self.n_states),
        )

    @cached_property
    def expected_reward(self) -> np.ndarray:
        """Expected immediate reward per (state, action); 0 on invalid pairs."""
        size = self.n_states * self.n_actions
        rows = np.repeat(np.arange(size), np.diff(self.indptr))
        flat = np.bincount(rows, weights=self.probs * self.rewards, minlength=size)
        return flat.reshape(self.n_states, self.n_actions)

    @cached_property
    def action_lists(self) -> tuple[np.ndarray, np.ndarray]:
        """Valid actions per state as a CSR pair (pointer, flat action list)."""
        counts = self.action_mask.sum(axis=1)
        ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        flat = np.nonzero(self.action_mask)[1].astype(np.int64)
        return ptr, flat

    def outcomes(self, state: int, action: int) -> list[tuple[int, float, float]]:
        row = state * self.n_actions + action
        lo, hi = self.indptr[row], self.indptr[row + 1]
        return [(int(self.next_states[k]), float(self.probs[k]), float(self.rewards[k])) for k in range(lo, hi)]


class TabularModel:
    """Generative view of a :class:`TabularMdp` over integer states.

    Outcomes are drawn by inverse CDF along the row in storage order, the
    same way the compiled kernel draws them.
    """

    def __init__(self, mdp: TabularMdp):
        self.mdp = mdp
        self.discount = mdp.discount
        ptr, flat = mdp.action_lists
        self._actions = [flat[ptr[s] : ptr[s + 1]].tolist() for s in range(mdp.n_states)]

    def actions(self, state: int) -> list[int]:
        return self._actions[state]

    def is_terminal(self, state: int) -> bool:
        return bool(self.mdp.terminal[state])

    def sample(self, state: int, action: int, rng: np.random.Generator) -> tuple[int, float]:
        mdp = self.mdp
        row = state * mdp.n_actions + action
        lo, hi = int(mdp.indptr[row]), int(mdp.indptr[row + 1])
        if hi == lo:
            raise DomainError(f"action {action} invalid at state {state}")
        u = rng.random()
        acc = 0.0
        k = lo
        while k < hi - 1:
            acc += mdp.probs[k]
            if u < acc:
                break
            k += 1
        return int(mdp.next_states[k]), float(mdp.rewards[k])
