"""Obstructed Sailing: a boat crosses a grid with random obstacles under a drifting wind.

Coordinates are ``(x, y)`` with ``y`` growing southwards (row order of the map
file), so North is ``dy = -1``.  Directions are integers 0..7 clockwise from
North.  Costs are returned as negative rewards.

Cost model: the angle between the action and the current wind (the direction
the wind blows towards) costs 1, 2, 3 or 4 for 0, 45, 90 or 135 degrees;
sailing straight into the wind is not allowed.  Switching tack adds 3.  The
tack of a move is +1 when the move lies 45..135 degrees clockwise of the wind,
-1 counterclockwise, and 0 when straight downwind; the previous tack is the
tack of the boat heading ``b`` under the previous wind ``w_prev``, and a
downwind move on either side never counts as a switch.
"""
from __future__ import annotations

import logging
import math
import os
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum
from typing import NamedTuple

import numba as nb
import numpy as np
from numba.experimental import jitclass
from scipy import ndimage

from .mdp import DomainError, GreedyPolicy, PriorValue, TabularMdp

log = logging.getLogger(__name__)

C_MIN, C_MAX = 1, 7
TACK_DELAY = 3
DISCOUNT = 0.99
WIND_SHIFTS = (0, -1, 1)  # unchanged, left, right; probability 1/3 each


class Direction(IntEnum):
    N = 0
    NE = 1
    E = 2
    SE = 3
    S = 4
    SW = 5
    W = 6
    NW = 7

    def opposite(self) -> Direction:
        return Direction((self + 4) % 8)

    def left(self) -> Direction:
        return Direction((self - 1) % 8)

    def right(self) -> Direction:
        return Direction((self + 1) % 8)


OFFSETS = np.array([(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)], dtype=np.int64)


class SailingState(NamedTuple):
    x: int
    y: int
    b: int
    w_prev: int
    w_curr: int


@dataclass(frozen=True, eq=False)
class SailingMap:
    width: int
    height: int
    blocked: np.ndarray  # (height, width) bool, indexed [y, x]
    start: tuple[int, int]
    goal: tuple[int, int]
    rejections: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.blocked.shape != (self.height, self.width):
            raise ValueError("obstacle mask shape does not match map size")
        if self.start == self.goal:
            raise ValueError("start and goal coincide")
        for name, (x, y) in (("start", self.start), ("goal", self.goal)):
            if not self.inside(x, y) or self.blocked[y, x]:
                raise ValueError(f"{name} {(x, y)} is off-map or blocked")

    def inside(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def free(self, x: int, y: int) -> bool:
        return self.inside(x, y) and not self.blocked[y, x]

    def connected(self) -> bool:
        labels, _ = ndimage.label(~self.blocked, structure=np.ones((3, 3), dtype=int))
        (sx, sy), (gx, gy) = self.start, self.goal
        return labels[sy, sx] == labels[gy, gx]

    def __eq__(self, other):
        return (
            isinstance(other, SailingMap)
            and (self.width, self.height, self.start, self.goal) == (other.width, other.height, other.start, other.goal)
            and np.array_equal(self.blocked, other.blocked)
        )


# -- dynamics -----------------------------------------------------------------


def angle_steps(a: int, w: int) -> int:
    """Angular difference in 45-degree steps, 0..4."""
    d = (a - w) % 8
    return min(d, 8 - d)


def tack(heading: int, wind: int) -> int:
    d = (heading - wind) % 8
    if 1 <= d <= 3:
        return 1
    if 5 <= d <= 7:
        return -1
    return 0


def move_cost(state: SailingState, action: int) -> int:
    """Deterministic cost C(s, a) of a valid move, tack delay included."""
    before = tack(state.b, state.w_prev)
    after = tack(action, state.w_curr)
    flip = before != 0 and after != 0 and before != after
    return angle_steps(action, state.w_curr) + 1 + TACK_DELAY * flip


def valid_actions(state: SailingState, smap: SailingMap) -> list[int]:
    against = (state.w_curr + 4) % 8
    out = []
    for d in range(8):
        if d == against:
            continue
        dx, dy = OFFSETS[d]
        if smap.free(state.x + int(dx), state.y + int(dy)):
            out.append(d)
    return out


def is_goal(state: SailingState, smap: SailingMap) -> bool:
    return (state.x, state.y) == smap.goal


def is_trapped(state: SailingState, smap: SailingMap) -> bool:
    return not is_goal(state, smap) and not valid_actions(state, smap)


def trap_penalty(discount: float) -> float:
    return C_MAX / (1.0 - discount)


def step(
    state: SailingState, action: int, smap: SailingMap, rng: np.random.Generator, discount: float = DISCOUNT
) -> tuple[SailingState, float]:
    """Sail one cell along ``action``; the wind then shifts left, right or not at all."""
    if action not in valid_actions(state, smap):
        raise DomainError(f"action {action} invalid at {state}")
    dx, dy = OFFSETS[action]
    u = rng.random()
    k = 0 if u < 1.0 / 3.0 else (1 if u < 1.0 / 3.0 + 1.0 / 3.0 else 2)
    nxt = SailingState(
        state.x + int(dx), state.y + int(dy), action, state.w_curr, (state.w_curr + WIND_SHIFTS[k]) % 8
    )
    reward = -float(move_cost(state, action))
    if is_trapped(nxt, smap):
        reward -= trap_penalty(discount)
    return nxt, reward


class SailingModel:
    """Generative model over :class:`SailingState` tuples.

    States with no valid action are terminal; entering one costs
    ``C_MAX / (1 - discount)`` on top of the move.
    """

    def __init__(self, smap: SailingMap, discount: float = DISCOUNT):
        self.map = smap
        self.discount = discount

    def actions(self, state):
        return valid_actions(state, self.map)

    def is_terminal(self, state):
        return is_goal(state, self.map) or not valid_actions(state, self.map)

    def sample(self, state, action, rng):
        return step(state, action, self.map, rng, self.discount)


# -- heuristics -----------------------------------------------------------------


def sail_towards_goal(state: SailingState, smap: SailingMap) -> int:
    """Valid action closest in angle to the bearing of the goal; ties go to the clockwise side."""
    actions = valid_actions(state, smap)
    if not actions:
        raise DomainError(f"no valid action at {state}")
    gx, gy = smap.goal
    bearing = math.degrees(math.atan2(gx - state.x, state.y - gy)) % 360.0

    def key(a):
        cw = (45.0 * a - bearing) % 360.0
        diff = min(cw, 360.0 - cw)
        return (round(diff, 9), round(cw, 9))

    return min(actions, key=key)


def chebyshev(x: int, y: int, goal: tuple[int, int]) -> int:
    return max(abs(x - goal[0]), abs(y - goal[1]))


def stg_prior(state: SailingState, action: int, smap: SailingMap, discount: float = DISCOUNT) -> tuple[int, float]:
    """``(1, -(C(s,a) + C_min (1 - gamma^(d+1)) / (1 - gamma)))`` with d the Chebyshev distance of s' to goal."""
    if action not in valid_actions(state, smap):
        raise DomainError(f"action {action} invalid at {state}")
    dx, dy = OFFSETS[action]
    d = chebyshev(state.x + int(dx), state.y + int(dy), smap.goal)
    tail = C_MIN * (1.0 - discount ** (d + 1)) / (1.0 - discount)
    return 1, -(move_cost(state, action) + tail)


# -- maps -------------------------------------------------------------------------


class MapGenerationError(RuntimeError):
    pass


def generate_map(
    width: int,
    height: int,
    p: float,
    start: tuple[int, int],
    goal: tuple[int, int],
    rng: np.random.Generator,
    max_rejections: int = 10_000,
) -> SailingMap:
    """Block each cell but start and goal with probability ``p``; resample until goal is reachable."""
    if not 0.0 <= p < 1.0:
        raise ValueError("blockage probability must lie in [0, 1)")
    for rejections in range(max_rejections + 1):
        blocked = rng.random((height, width)) < p
        blocked[start[1], start[0]] = False
        blocked[goal[1], goal[0]] = False
        smap = SailingMap(width, height, blocked, start, goal, rejections)
        if smap.connected():
            if rejections:
                log.debug("map accepted after %d rejections", rejections)
            return smap
    raise MapGenerationError(f"no connected {width}x{height} map with p={p} after {max_rejections} rejections")


def default_corners(width: int, height: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """Start two cells in from the north-west corner, goal two in from the south-east."""
    return (2, 2), (width - 3, height - 3)


def write_map(smap: SailingMap, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(format_map(smap))


def format_map(smap: SailingMap) -> str:
    rows = []
    for y in range(smap.height):
        row = ["#" if smap.blocked[y, x] else "." for x in range(smap.width)]
        rows.append(row)
    rows[smap.start[1]][smap.start[0]] = "S"
    rows[smap.goal[1]][smap.goal[0]] = "G"
    return f"{smap.width} {smap.height}\n" + "".join("".join(r) + "\n" for r in rows)


def parse_map(text: str) -> SailingMap:
    lines = text.splitlines()
    width, height = (int(t) for t in lines[0].split())
    rows = lines[1 : 1 + height]
    if len(rows) != height or any(len(r) != width for r in rows):
        raise ValueError("map rows do not match the declared size")
    blocked = np.zeros((height, width), dtype=bool)
    start = goal = None
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch == "#":
                blocked[y, x] = True
            elif ch == "S":
                start = (x, y)
            elif ch == "G":
                goal = (x, y)
            elif ch != ".":
                raise ValueError(f"unexpected map character {ch!r}")
    if start is None or goal is None:
        raise ValueError("map needs one S and one G")
    return SailingMap(width, height, blocked, start, goal)


def read_map(path: str | os.PathLike) -> SailingMap:
    with open(path) as fh:
        return parse_map(fh.read())


# -- tabular form -------------------------------------------------------------------


class StateIndex:
    """Dense indexing of sailing states over the free cells of a map.

    ``index = cell * 512 + b * 64 + w_prev * 8 + w_curr`` with cells in
    row-major order.
    """

    def __init__(self, smap: SailingMap):
        self.map = smap
        ys, xs = np.nonzero(~smap.blocked)
        self.xs, self.ys = xs.astype(np.int64), ys.astype(np.int64)
        self.cell = np.full((smap.height, smap.width), -1, dtype=np.int64)
        self.cell[ys, xs] = np.arange(xs.size)
        self.n_states = xs.size * 512

    def index(self, s: SailingState) -> int:
        c = self.cell[s.y, s.x]
        if c < 0:
            raise DomainError(f"({s.x}, {s.y}) is not a free cell")
        return int(c) * 512 + s.b * 64 + s.w_prev * 8 + s.w_curr

    def state(self, i: int) -> SailingState:
        c, rest = divmod(int(i), 512)
        b, rest = divmod(rest, 64)
        wp, wc = divmod(rest, 8)
        return SailingState(int(self.xs[c]), int(self.ys[c]), b, wp, wc)

    def decode(self) -> tuple[np.ndarray, ...]:
        """Arrays (x, y, b, w_prev, w_curr) for every state index."""
        i = np.arange(self.n_states)
        c = i // 512
        return self.xs[c], self.ys[c], (i // 64) % 8, (i // 8) % 8, i % 8


def _tack_array(heading: np.ndarray, wind: np.ndarray) -> np.ndarray:
    d = (heading - wind) % 8
    return np.where((d >= 1) & (d <= 3), 1, np.where(d >= 5, -1, 0))


def move_tables(smap: SailingMap, index: StateIndex) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per (state, action): validity mask, destination cell (-1 if invalid) and move cost."""
    x, y, b, wp, wc = index.decode()
    S = index.n_states
    valid = np.zeros((S, 8), dtype=bool)
    dest = np.full((S, 8), -1, dtype=np.int64)
    cost = np.zeros((S, 8), dtype=np.int64)
    at_goal = (x == smap.goal[0]) & (y == smap.goal[1])
    before = _tack_array(b, wp)
    for a in range(8):
        nx, ny = x + OFFSETS[a, 0], y + OFFSETS[a, 1]
        inside = (nx >= 0) & (nx < smap.width) & (ny >= 0) & (ny < smap.height)
        cell = np.full(S, -1, dtype=np.int64)
        cell[inside] = index.cell[ny[inside], nx[inside]]
        ok = (cell >= 0) & (wc != (a + 4) % 8) & ~at_goal
        valid[:, a] = ok
        dest[:, a] = np.where(ok, cell, -1)
        after = _tack_array(np.full(S, a), wc)
        diff = (a - wc) % 8
        flip = (before != 0) & (after != 0) & (before != after)
        cost[:, a] = np.minimum(diff, 8 - diff) + 1 + TACK_DELAY * flip
    return valid, dest, cost


def to_tabular(smap: SailingMap, discount: float = DISCOUNT) -> TabularMdp:
    """Enumerate every state on free cells with exact wind-shift transitions."""
    index = StateIndex(smap)
    valid, dest, cost = move_tables(smap, index)
    x, y, _, _, wc = index.decode()
    at_goal = (x == smap.goal[0]) & (y == smap.goal[1])
    trapped = ~valid.any(axis=1) & ~at_goal
    terminal = at_goal | trapped

    rows_s, rows_a = np.nonzero(valid)  # row-major: sorted by (s, a)
    d = dest[rows_s, rows_a]
    w = wc[rows_s]
    base = d * 512 + rows_a * 64 + w * 8
    nxt = np.stack([base + (w + k) % 8 for k in WIND_SHIFTS], axis=1)
    rew = -cost[rows_s, rows_a][:, None] - np.where(trapped[nxt], trap_penalty(discount), 0.0)

    counts = np.zeros(index.n_states * 8, dtype=np.int64)
    counts[rows_s * 8 + rows_a] = 3
    indptr = np.concatenate([[0], np.cumsum(counts)])
    mdp = TabularMdp(
        n_states=index.n_states,
        n_actions=8,
        indptr=indptr,
        next_states=nxt.ravel(),
        probs=np.full(nxt.size, 1.0 / 3.0),
        rewards=rew.ravel().astype(np.float64),
        action_mask=valid,
        terminal=terminal,
        discount=discount,
        meta={"index": index, "map": smap, "cost": cost, "dest": dest},
    )
    return mdp


def stg_table(smap: SailingMap, index: StateIndex) -> np.ndarray:
    """SailTowardsGoal action per state index; -1 on goal and trapped states."""
    table = np.full(index.n_states, -1, dtype=np.int64)
    for c, (x, y) in enumerate(zip(index.xs, index.ys)):
        if (x, y) == smap.goal:
            continue
        for wc in range(8):
            probe = SailingState(int(x), int(y), 0, wc, wc)
            if not valid_actions(probe, smap):
                continue
            a = sail_towards_goal(probe, smap)
            for b in range(8):
                lo = c * 512 + b * 64 + wc
                table[lo : lo + 64 - wc : 8] = a
    return table


def stg_prior_table(mdp: TabularMdp, discount: float | None = None) -> np.ndarray:
    """Q_STG for every (state, action) of a tabular sailing model; 0 on invalid pairs."""
    smap: SailingMap = mdp.meta["map"]
    index: StateIndex = mdp.meta["index"]
    gamma = mdp.discount if discount is None else discount
    dest, cost = mdp.meta["dest"], mdp.meta["cost"]
    safe = np.maximum(dest, 0)
    dist = np.maximum(np.abs(index.xs[safe] - smap.goal[0]), np.abs(index.ys[safe] - smap.goal[1]))
    q = -(cost + C_MIN * (1.0 - gamma ** (dist + 1)) / (1.0 - gamma))
    return np.where(mdp.action_mask, q, 0.0)


def prior_greedy_table(mdp: TabularMdp, prior: np.ndarray) -> np.ndarray:
    """Lowest-index argmax of a prior table over valid actions; -1 where none."""
    q = np.where(mdp.action_mask, prior, -np.inf)
    return np.where(mdp.action_mask.any(axis=1), np.argmax(q, axis=1), -1).astype(np.int64)


def random_start(smap: SailingMap, rng: np.random.Generator) -> SailingState:
    """Start cell with uniform heading and wind; the previous wind is one shift away."""
    b, wc = (int(v) for v in rng.integers(0, 8, size=2))
    wp = (wc - WIND_SHIFTS[int(rng.integers(0, 3))]) % 8
    x, y = smap.start
    return SailingState(x, y, b, wp, wc)


def shortest_moves(smap: SailingMap) -> np.ndarray:
    """King-move BFS distance to the goal per cell (-1 if unreachable)."""
    dist = np.full((smap.height, smap.width), -1, dtype=np.int64)
    gx, gy = smap.goal
    dist[gy, gx] = 0
    queue = deque([(gx, gy)])
    while queue:
        x, y = queue.popleft()
        for dx, dy in OFFSETS:
            nx, ny = x + int(dx), y + int(dy)
            if smap.free(nx, ny) and dist[ny, nx] < 0:
                dist[ny, nx] = dist[y, x] + 1
                queue.append((nx, ny))
    return dist


class SailingProblem:
    """A map with its tabular model and the heuristic tables agents draw on.

    ``solution`` is computed lazily by value iteration; pass ``solution`` to
    reuse a cached one.
    """

    def __init__(self, smap: SailingMap, discount: float = DISCOUNT, solution=None):
        self.map = smap
        self.discount = discount
        self.mdp = to_tabular(smap, discount)
        self.index: StateIndex = self.mdp.meta["index"]
        self._solution = solution
        self._cache: dict = {}

    @property
    def solution(self):
        if self._solution is None:
            from .solver import value_iteration

            self._solution = value_iteration(self.mdp)
        return self._solution

    def stg_policy(self) -> GreedyPolicy:
        if "stg" not in self._cache:
            self._cache["stg"] = GreedyPolicy.from_table(stg_table(self.map, self.index), name="stg")
        return self._cache["stg"]

    def stg_prior(self) -> PriorValue:
        if "stg_prior" not in self._cache:
            self._cache["stg_prior"] = PriorValue.from_table(stg_prior_table(self.mdp), n=1, name="stg")
        return self._cache["stg_prior"]

    def stg_greedy_policy(self) -> GreedyPolicy:
        """argmax_a Q_STG(s, a): the rollout policy UCT-S uses with SailTowardsGoal."""
        if "stg_q" not in self._cache:
            table = prior_greedy_table(self.mdp, self.stg_prior().table)
            self._cache["stg_q"] = GreedyPolicy.from_table(table, name="stg_q")
        return self._cache["stg_q"]

    def optimal_policy(self) -> GreedyPolicy:
        if "optimal" not in self._cache:
            from .solver import extract_greedy

            self._cache["optimal"] = extract_greedy(self.solution)
        return self._cache["optimal"]

    def mixture_prior(self, p: float) -> PriorValue:
        """Q of StochasticOptimal.p by exact policy evaluation, as a UCT-I prior."""
        key = ("so_prior", p)
        if key not in self._cache:
            from .solver import evaluate_policy, mixture_matrix

            probs = mixture_matrix(self.mdp, self.optimal_policy().table, p)
            _, q = evaluate_policy(self.mdp, probs)
            self._cache[key] = PriorValue.from_table(np.where(self.mdp.action_mask, q, 0.0), n=1, name=f"so{p}")
        return self._cache[key]


    def fast_model(self, config=None):
        """Compiled kernel carrying the tables ``config`` refers to."""
        from .uct.fast import config_tables

        guides, priors = config_tables(config) if config is not None else ({}, {})
        return sailing_kernel(self.map, self.discount, guides, priors)


# -- compiled kernel ------------------------------------------------------------------

_THIRD = 1.0 / 3.0

_kernel_spec = [
    ("nbr", nb.int64[:, :]),
    ("acts", nb.int64[:, :, :]),
    ("n_valid", nb.int64[:, :]),
    ("goal_cell", nb.int64),
    ("penalty", nb.float64),
    ("guides", nb.int64[:, :]),
    ("priors", nb.float64[:, :, :]),
    ("discount", nb.float64),
]


@jitclass(_kernel_spec)
class SailingKernel:
    """Procedural sailing dynamics over :class:`StateIndex` integers.

    Draws and arithmetic match :func:`step` and :func:`to_tabular` exactly,
    but only cell-sized tables are touched per step.
    """

    def __init__(self, nbr, acts, n_valid, goal_cell, penalty, guides, priors, discount):
        self.nbr = nbr
        self.acts = acts
        self.n_valid = n_valid
        self.goal_cell = goal_cell
        self.penalty = penalty
        self.guides = guides
        self.priors = priors
        self.discount = discount

    def num_actions(self, s):
        return self.n_valid[s >> 9, s & 7]

    def action_at(self, s, i):
        return self.acts[s >> 9, s & 7, i]

    def is_terminal(self, s):
        c = s >> 9
        return c == self.goal_cell or self.n_valid[c, s & 7] == 0

    def guide(self, s, g):
        return self.guides[g, s]

    def prior_q(self, s, a, p):
        return self.priors[p, s, a]

    def sample(self, s, a, rng):
        c = s >> 9
        b = (s >> 6) & 7
        wp = (s >> 3) & 7
        wc = s & 7
        u = rng.random()
        if u < _THIRD:
            w2 = wc
        elif u < _THIRD + _THIRD:
            w2 = (wc + 7) & 7
        else:
            w2 = (wc + 1) & 7
        d = (a - wc) & 7
        cost = min(d, 8 - d) + 1
        t0 = (b - wp) & 7
        before = 1 if 1 <= t0 <= 3 else (-1 if t0 >= 5 else 0)
        after = 1 if 1 <= d <= 3 else (-1 if d >= 5 else 0)
        if before != 0 and after != 0 and before != after:
            cost += TACK_DELAY
        dest = self.nbr[c, a]
        reward = -float(cost)
        if dest != self.goal_cell and self.n_valid[dest, w2] == 0:
            reward -= self.penalty
        return dest * 512 + a * 64 + wc * 8 + w2, reward


def sailing_kernel(smap: SailingMap, discount: float = DISCOUNT, guides=None, priors=None):
    """Compile a map into a :class:`~uctaux.uct.fast.FastModel` over :class:`StateIndex` states."""
    from .uct.fast import FastModel, stack_tables

    index = StateIndex(smap)
    C = index.xs.size
    nbr = np.full((C, 8), -1, dtype=np.int64)
    for a in range(8):
        nx, ny = index.xs + OFFSETS[a, 0], index.ys + OFFSETS[a, 1]
        inside = (nx >= 0) & (nx < smap.width) & (ny >= 0) & (ny < smap.height)
        nbr[inside, a] = index.cell[ny[inside], nx[inside]]
    acts = np.full((C, 8, 8), -1, dtype=np.int64)
    n_valid = np.zeros((C, 8), dtype=np.int64)
    for c in range(C):
        for wc in range(8):
            ok = [a for a in range(8) if nbr[c, a] >= 0 and a != (wc + 4) % 8]
            n_valid[c, wc] = len(ok)
            acts[c, wc, : len(ok)] = ok
    goal_cell = int(index.cell[smap.goal[1], smap.goal[0]])
    n_valid[goal_cell, :] = 0
    guides, priors = guides or {}, priors or {}
    g, p = stack_tables(guides, priors)
    kernel = SailingKernel(nbr, acts, n_valid, goal_cell, trap_penalty(discount), g, p, float(discount))
    return FastModel(
        kernel,
        max_actions=8,
        guides={k: i for i, k in enumerate(guides)},
        priors={k: i for i, k in enumerate(priors)},
    )
