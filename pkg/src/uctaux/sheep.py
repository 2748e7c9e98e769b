"""Sheep Savior: a shepherd and a dog herd a sheep into its pen while two ghosts hunt it.

Positions are indices of free maze cells in row-major order.  The game state
is a :class:`SheepState`; the compiled kernel uses the same state packed into
one integer (:func:`pack`).

Step order: both players move at once (a shooting shepherd stays put), the
shot is resolved, the sheep moves, then the living ghosts in index order.
A ghost standing on the sheep ends the game with -10; otherwise a sheep on
the pen ends it with +10.  Each ghost killed this step is worth +5.

Non-player characters flee the nearest player when one is within
``flee_radius`` maze steps.  Otherwise a ghost closes in on the sheep and the
sheep backs away from the nearest living ghost; a character with nothing to
chase or avoid stays where it is.  Ties between equally good moves are broken
uniformly at random, with one draw only when there is a tie.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numba as nb
import numpy as np
from numba.experimental import jitclass
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from .mdp import DomainError, GreedyPolicy, PriorValue, TabularMdp, UniformPolicy

log = logging.getLogger(__name__)

DISCOUNT = 0.99
SHEPHERD_PARTS = ("no_move", "N", "S", "E", "W", "shoot")
DOG_PARTS = ("no_move", "N", "S", "E", "W")
N_ACTIONS = len(SHEPHERD_PARTS) * len(DOG_PARTS)
SHOOT = 5
STEPS = ((0, 0), (0, -1), (0, 1), (1, 0), (-1, 0))  # (dx, dy) for no_move, N, S, E, W
MAX_HP = 2
GHOST_REWARD, PEN_REWARD, DEATH_PENALTY = 5.0, 10.0, -10.0
RUNNING, PENNED, KILLED = 0, 1, 2
FLEE_RADIUS, SHOOT_RANGE = 2, 1
DEAD = -1


def compound(shepherd_part: int, dog_part: int) -> int:
    return shepherd_part * len(DOG_PARTS) + dog_part


def split(action: int) -> tuple[int, int]:
    return divmod(action, len(DOG_PARTS))


def action_name(action: int) -> str:
    sp, dp = split(action)
    return f"{SHEPHERD_PARTS[sp]}+{DOG_PARTS[dp]}"


class SheepState(NamedTuple):
    shepherd: int
    dog: int
    sheep: int
    ghosts: tuple[int, int]  # DEAD once hp reaches 0
    hp: tuple[int, int]
    cause: int = RUNNING


# -- maze -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Maze:
    walls: np.ndarray  # (height, width) bool, indexed [y, x]
    pen: tuple[int, int]
    shepherd: tuple[int, int]
    dog: tuple[int, int]
    sheep: tuple[int, int]
    ghosts: tuple[tuple[int, int], tuple[int, int]]
    flee_radius: int = FLEE_RADIUS
    shoot_range: int = SHOOT_RANGE
    # derived
    cell: np.ndarray = field(init=False, repr=False)
    xs: np.ndarray = field(init=False, repr=False)
    ys: np.ndarray = field(init=False, repr=False)
    dist: np.ndarray = field(init=False, repr=False)
    player_moves: np.ndarray = field(init=False, repr=False)
    npc_moves: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        h, w = self.walls.shape
        ys, xs = np.nonzero(~self.walls)
        cell = np.full((h, w), -1, dtype=np.int64)
        cell[ys, xs] = np.arange(xs.size)
        for name, (x, y) in self.landmarks().items():
            if not (0 <= x < w and 0 <= y < h) or self.walls[y, x]:
                raise DomainError(f"{name} at {(x, y)} is not on a free cell")
        player = np.repeat(np.arange(xs.size)[:, None], len(STEPS), axis=1)
        npc = np.full((xs.size, len(STEPS)), -1, dtype=np.int64)
        npc[:, 0] = np.arange(xs.size)
        for k, (dx, dy) in enumerate(STEPS[1:], start=1):
            nx, ny = xs + dx, ys + dy
            ok = (nx >= 0) & (nx < w) & (ny >= 0) & (ny < h)
            ok[ok] = ~self.walls[ny[ok], nx[ok]]
            player[ok, k] = cell[ny[ok], nx[ok]]
            npc[ok, k] = cell[ny[ok], nx[ok]]
        src = np.repeat(np.arange(xs.size), len(STEPS) - 1)
        dst = npc[:, 1:].ravel()
        keep = dst >= 0
        graph = coo_matrix((np.ones(keep.sum()), (src[keep], dst[keep])), shape=(xs.size, xs.size)).tocsr()
        if connected_components(graph, directed=False)[0] != 1:
            raise DomainError("maze free cells are not connected")
        dist = shortest_path(graph, method="D", unweighted=True).astype(np.int64)
        for k, v in (("cell", cell), ("xs", xs.astype(np.int64)), ("ys", ys.astype(np.int64)),
                     ("dist", dist), ("player_moves", player), ("npc_moves", npc)):
            object.__setattr__(self, k, v)

    def landmarks(self) -> dict[str, tuple[int, int]]:
        return {"pen": self.pen, "shepherd": self.shepherd, "dog": self.dog, "sheep": self.sheep,
                "ghost 1": self.ghosts[0], "ghost 2": self.ghosts[1]}

    @property
    def n_cells(self) -> int:
        return int(self.xs.size)

    @property
    def pen_cell(self) -> int:
        return self.index(self.pen)

    def index(self, xy: tuple[int, int]) -> int:
        return int(self.cell[xy[1], xy[0]])

    def coords(self, c: int) -> tuple[int, int]:
        return int(self.xs[c]), int(self.ys[c])

    def start_state(self) -> SheepState:
        g = tuple(self.index(p) for p in self.ghosts)
        return SheepState(self.index(self.shepherd), self.index(self.dog), self.index(self.sheep), g, (MAX_HP, MAX_HP))


MAZE_CHARS = {".": "free", "#": "wall", "P": "pen", "1": "shepherd", "2": "dog", "s": "sheep", "g": "ghost"}


def parse_maze(text: str, **kwargs) -> Maze:
    """Read a maze drawn with ``. # P 1 2 s g`` (two ``g``)."""
    rows = [r for r in text.strip("\n").splitlines() if r.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise DomainError("maze rows must be non-empty and of equal length")
    found: dict[str, list[tuple[int, int]]] = {}
    walls = np.zeros((len(rows), len(rows[0])), dtype=bool)
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch not in MAZE_CHARS:
                raise DomainError(f"unknown maze character {ch!r} at {(x, y)}")
            walls[y, x] = ch == "#"
            if ch not in ".#":
                found.setdefault(ch, []).append((x, y))
    for ch, want in (("P", 1), ("1", 1), ("2", 1), ("s", 1), ("g", 2)):
        if len(found.get(ch, ())) != want:
            raise DomainError(f"maze needs exactly {want} {MAZE_CHARS[ch]} marker(s) {ch!r}")
    return Maze(walls, found["P"][0], found["1"][0], found["2"][0], found["s"][0], tuple(found["g"]), **kwargs)


def format_maze(maze: Maze) -> str:
    grid = [["#" if w else "." for w in row] for row in maze.walls]
    for ch, xy in (("P", maze.pen), ("1", maze.shepherd), ("2", maze.dog), ("s", maze.sheep),
                   ("g", maze.ghosts[0]), ("g", maze.ghosts[1])):
        grid[xy[1]][xy[0]] = ch
    return "\n".join("".join(r) for r in grid) + "\n"


def read_maze(path, **kwargs) -> Maze:
    with open(path) as fh:
        return parse_maze(fh.read(), **kwargs)


# Open lattice of pillars; the pen sits in the top-right corner.
REFERENCE_MAZE = """\
#########
#1.....P#
#.#.#.#.#
#.......#
#.#.#.#.#
#.......#
#.#.#.#.#
#s2.g.g.#
#########
"""

# Walled pockets with single-cell entrances; greedy escort tends to get stuck here.
CHOKE_MAZE = """\
#########
#1.....P#
#.##.##.#
#.#...#.#
#...#...#
#.#...#.#
#.##.##.#
#s2.g..g#
#########
"""

MAZES = {"reference": REFERENCE_MAZE, "choke": CHOKE_MAZE}
START_GHOST_GAP = 5


def reference_maze(**kwargs) -> Maze:
    return parse_maze(REFERENCE_MAZE, **kwargs)


# -- dynamics ---------------------------------------------------------------------


def _pick(cells: list[int], rng: np.random.Generator) -> int:
    if len(cells) == 1:
        return cells[0]
    return cells[min(int(rng.random() * len(cells)), len(cells) - 1)]


def npc_move(kind: str, state: SheepState, maze: Maze, rng: np.random.Generator, ghost: int = 0) -> int:
    """Next cell of the sheep (``kind="sheep"``) or of ghost ``ghost``.

    ``state`` must already hold the players' new positions (and the sheep's,
    for a ghost).  A sheep of ``DEAD`` (as in a ghost subtask) is nothing to chase.
    """
    d = maze.dist
    pos = state.sheep if kind == "sheep" else state.ghosts[ghost]
    players = (state.shepherd, state.dog)
    cands = [int(c) for c in maze.npc_moves[pos] if c >= 0]
    if min(d[pos, p] for p in players) <= maze.flee_radius:
        scores = [min(d[c, p] for p in players) for c in cands]
    elif kind == "sheep":
        alive = [g for g, h in zip(state.ghosts, state.hp) if h > 0]
        if not alive:
            return pos
        scores = [min(d[c, g] for g in alive) for c in cands]
    elif kind == "ghost":
        if state.sheep == DEAD:
            return pos
        scores = [-d[c, state.sheep] for c in cands]
    else:
        raise ValueError(f"unknown character kind {kind!r}")
    best = max(scores)
    return _pick([c for c, s in zip(cands, scores) if s == best], rng)


def shoot_target(shepherd: int, ghosts, hp, maze: Maze) -> int:
    """Index of the nearest living ghost within range (lower index on ties), or -1."""
    best, target = maze.shoot_range + 1, -1
    for i, (g, h) in enumerate(zip(ghosts, hp)):
        if h > 0 and maze.dist[shepherd, g] < best:
            best, target = maze.dist[shepherd, g], i
    return target


def sheep_step(state: SheepState, action: int, maze: Maze, rng: np.random.Generator) -> tuple[SheepState, float]:
    if state.cause != RUNNING:
        raise DomainError("the game is over")
    if not 0 <= action < N_ACTIONS:
        raise DomainError(f"action {action} outside 0..{N_ACTIONS - 1}")
    sp, dp = split(action)
    shepherd = state.shepherd if sp == SHOOT else int(maze.player_moves[state.shepherd, sp])
    dog = int(maze.player_moves[state.dog, dp])
    ghosts, hp = list(state.ghosts), list(state.hp)
    reward = 0.0
    if sp == SHOOT:
        t = shoot_target(shepherd, ghosts, hp, maze)
        if t >= 0:
            hp[t] -= 1
            if hp[t] == 0:
                ghosts[t] = DEAD
                reward += GHOST_REWARD
    mid = SheepState(shepherd, dog, state.sheep, tuple(ghosts), tuple(hp))
    sheep = npc_move("sheep", mid, maze, rng)
    mid = mid._replace(sheep=sheep)
    for i in range(2):
        if hp[i] > 0:
            ghosts[i] = npc_move("ghost", mid, maze, rng, ghost=i)
    cause = RUNNING
    if any(h > 0 and g == sheep for g, h in zip(ghosts, hp)):
        cause = KILLED
        reward += DEATH_PENALTY
    elif sheep == maze.pen_cell:
        cause = PENNED
        reward += PEN_REWARD
    return SheepState(shepherd, dog, sheep, tuple(ghosts), tuple(hp), cause), reward


ALL_ACTIONS = list(range(N_ACTIONS))


class SheepModel:
    """Generative model over :class:`SheepState` tuples; all 30 actions are always valid."""

    def __init__(self, maze: Maze, discount: float = DISCOUNT):
        self.maze = maze
        self.discount = discount

    def actions(self, state):
        return [] if state.cause != RUNNING else ALL_ACTIONS

    def is_terminal(self, state):
        return state.cause != RUNNING

    def sample(self, state, action, rng):
        return sheep_step(state, action, self.maze, rng)


def random_start(maze: Maze, rng: np.random.Generator, min_ghost_gap: int = START_GHOST_GAP) -> SheepState:
    """Five distinct non-pen cells with both ghosts at least ``min_ghost_gap`` steps from the sheep."""
    free = np.array([c for c in range(maze.n_cells) if c != maze.pen_cell])
    for _ in range(10_000):
        sh, dog, sheep, g1, g2 = (int(c) for c in rng.choice(free, size=5, replace=False))
        if min(maze.dist[sheep, g1], maze.dist[sheep, g2]) >= min_ghost_gap and sheep != maze.pen_cell:
            return SheepState(sh, dog, sheep, (g1, g2), (MAX_HP, MAX_HP))
    raise DomainError("could not place characters on this maze")


# -- packed states ----------------------------------------------------------------
# bits: shepherd 0-5, dog 6-11, sheep 12-17, ghost1 18-23, ghost2 24-29,
# hp1 30-31, hp2 32-33, cause 34-35.  Dead ghosts are stored at cell 0.


def pack(state: SheepState) -> int:
    g1 = state.ghosts[0] if state.hp[0] > 0 else 0
    g2 = state.ghosts[1] if state.hp[1] > 0 else 0
    return (state.shepherd | state.dog << 6 | state.sheep << 12 | g1 << 18 | g2 << 24
            | state.hp[0] << 30 | state.hp[1] << 32 | state.cause << 34)


def unpack(s: int) -> SheepState:
    s = int(s)
    hp = ((s >> 30) & 3, (s >> 32) & 3)
    g = ((s >> 18) & 63, (s >> 24) & 63)
    ghosts = tuple(gi if h > 0 else DEAD for gi, h in zip(g, hp))
    return SheepState(s & 63, (s >> 6) & 63, (s >> 12) & 63, ghosts, hp, (s >> 34) & 3)


# -- subtasks ---------------------------------------------------------------------


@dataclass(eq=False)
class SubtaskModel:
    """Players plus one character, solved exactly.

    Sheep subtask states are ``(shepherd * C + dog) * C + sheep``; ghost subtask
    states add ``(hp - 1) * C**3`` and one absorbing state ``2 * C**3`` for a
    dead ghost.  ``q`` is zero on terminal states.
    """

    index: int
    kind: str
    mdp: TabularMdp
    solution: object
    q: np.ndarray

    def project(self, state: SheepState) -> int:
        C = self.mdp.meta["n_cells"]
        if self.kind == "sheep":
            return (state.shepherd * C + state.dog) * C + state.sheep
        i = self.index - 2
        h = state.hp[i]
        if h == 0:
            return 2 * C**3
        return (h - 1) * C**3 + (state.shepherd * C + state.dog) * C + state.ghosts[i]


def _flee_outcomes(maze: Maze) -> np.ndarray:
    """(C, C, C, 5) mask: candidate moves of a fleeing character at ``npc`` given the two players.

    Where no player is within the flee radius only the stay slot is set.
    """
    C, d, cand = maze.n_cells, maze.dist, maze.npc_moves
    safe = np.maximum(cand, 0)
    # score[npc, p1, p2, k] = min(d[cand, p1], d[cand, p2])
    dc = d[safe]  # (C, 5, C)
    score = np.minimum(dc[:, None, :, :, None], dc[:, None, :, None, :])  # (C, 1, 5, C, C)
    score = np.moveaxis(score[:, 0], 1, 3)  # (C, C, C, 5)
    score = np.where((cand >= 0)[:, None, None, :], score, -1)
    best = score.max(axis=3, keepdims=True)
    mask = score == best
    near = np.minimum(d[:, :, None], d[:, None, :]) <= maze.flee_radius
    stay = np.zeros(len(STEPS), dtype=bool)
    stay[0] = True
    return np.where(near[..., None], mask, stay)


def _player_tables(maze: Maze) -> tuple[np.ndarray, np.ndarray]:
    """New shepherd and dog cell per (cell, action)."""
    sp, dp = np.divmod(np.arange(N_ACTIONS), len(DOG_PARTS))
    pm = maze.player_moves
    shepherd = np.where(sp == SHOOT, np.arange(maze.n_cells)[:, None], pm[:, np.minimum(sp, 4)])
    return shepherd, pm[:, dp]


def _assemble(n_states, nxt, prob, rew, mask, terminal, discount, meta) -> TabularMdp:
    """Flatten (S*A, 5) outcome slots into a :class:`TabularMdp`."""
    counts = mask.sum(axis=1)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    action_mask = np.repeat(~terminal, N_ACTIONS).reshape(n_states, N_ACTIONS)
    return TabularMdp(n_states, N_ACTIONS, indptr, nxt[mask], prob[mask], rew[mask], action_mask, terminal,
                      discount, meta)


def sheep_subtask_mdp(maze: Maze, discount: float = DISCOUNT, flee=None) -> TabularMdp:
    C = maze.n_cells
    flee = _flee_outcomes(maze) if flee is None else flee
    sh2, dog2 = _player_tables(maze)
    sh, dog, npc = np.unravel_index(np.arange(C**3), (C, C, C))
    a = np.arange(N_ACTIONS)
    s_sh, s_dog = sh2[sh][:, a], dog2[dog][:, a]  # (S, A)
    moves = flee[npc[:, None], s_sh, s_dog]  # (S, A, 5)
    cells = maze.npc_moves[npc][:, None, :]
    terminal = npc == maze.pen_cell
    mask = moves & ~terminal[:, None, None]
    prob = mask / np.maximum(mask.sum(axis=2, keepdims=True), 1)
    nxt = (s_sh[..., None] * C + s_dog[..., None]) * C + np.maximum(cells, 0)
    rew = np.where(cells == maze.pen_cell, PEN_REWARD, 0.0) * np.ones_like(prob)
    S = C**3
    return _assemble(S, nxt.reshape(S * N_ACTIONS, -1), prob.reshape(S * N_ACTIONS, -1),
                     rew.reshape(S * N_ACTIONS, -1), mask.reshape(S * N_ACTIONS, -1), terminal, discount,
                     {"n_cells": C, "kind": "sheep"})


def ghost_subtask_mdp(maze: Maze, discount: float = DISCOUNT, flee=None) -> TabularMdp:
    C = maze.n_cells
    C3 = C**3
    flee = _flee_outcomes(maze) if flee is None else flee
    sh2, dog2 = _player_tables(maze)
    S = 2 * C3 + 1
    idx = np.arange(2 * C3)
    hp = idx // C3 + 1
    sh, dog, g = np.unravel_index(idx % C3, (C, C, C))
    a = np.arange(N_ACTIONS)
    s_sh, s_dog = sh2[sh][:, a], dog2[dog][:, a]
    hit = (a // len(DOG_PARTS) == SHOOT)[None, :] & (maze.dist[s_sh, g[:, None]] <= maze.shoot_range)
    hp2 = hp[:, None] - hit
    killed = hp2 == 0
    moves = flee[g[:, None], s_sh, s_dog]
    cells = np.broadcast_to(maze.npc_moves[g][:, None, :], moves.shape)
    slot0 = np.zeros(len(STEPS), dtype=bool)
    slot0[0] = True
    mask = np.where(killed[..., None], slot0, moves)
    prob = mask / mask.sum(axis=2, keepdims=True)
    alive_next = (np.maximum(hp2, 1) - 1)[..., None] * C3 + (s_sh[..., None] * C + s_dog[..., None]) * C + np.maximum(cells, 0)
    nxt = np.where(killed[..., None], 2 * C3, alive_next)
    rew = np.where(killed[..., None], GHOST_REWARD, 0.0) * np.ones_like(prob)
    pad = lambda arr, fill: np.concatenate([arr.reshape(2 * C3 * N_ACTIONS, -1),
                                            np.full((N_ACTIONS, len(STEPS)), fill, dtype=arr.dtype)])
    terminal = np.zeros(S, dtype=bool)
    terminal[-1] = True
    return _assemble(S, pad(nxt, 0), pad(prob, 0.0), pad(rew, 0.0), pad(mask, False), terminal, discount,
                     {"n_cells": C, "kind": "ghost"})


def build_subtasks(maze: Maze, discount: float = DISCOUNT, tolerance: float = 1e-6, solutions=None) -> list[SubtaskModel]:
    """The sheep subtask and one subtask per ghost, each solved by value iteration.

    The two ghost subtasks have identical dynamics, so they share one model
    and one solution.  ``solutions`` may supply ``(sheep, ghost)`` results.
    """
    from .solver import value_iteration

    if maze.n_cells > 63:
        raise DomainError("packed states hold at most 63 free cells")
    flee = _flee_outcomes(maze)
    out = []
    shared = None
    for i, kind in enumerate(("sheep", "ghost", "ghost"), start=1):
        if kind == "ghost" and shared is not None:
            out.append(SubtaskModel(i, kind, shared.mdp, shared.solution, shared.q))
            continue
        mdp = (sheep_subtask_mdp if kind == "sheep" else ghost_subtask_mdp)(maze, discount, flee)
        sol = solutions[0 if kind == "sheep" else 1] if solutions else value_iteration(mdp, tolerance)
        log.info("%s subtask: %d states, %d sweeps", kind, mdp.n_states, sol.iterations)
        q = np.where(mdp.action_mask, sol.q, 0.0)
        out.append(SubtaskModel(i, kind, mdp, sol, q))
        if kind == "ghost":
            shared = out[-1]
    return out


def goal_averaging(state: SheepState, action: int, subtasks: list[SubtaskModel]) -> float:
    """Mean of the subtask Q-values at the projected states; dead ghosts give 0."""
    return sum(float(t.q[t.project(state), action]) for t in subtasks) / len(subtasks)


def goal_averaging_row(state: SheepState, subtasks: list[SubtaskModel]) -> np.ndarray:
    return sum(t.q[t.project(state)] for t in subtasks) / len(subtasks)


def ga_action(state: SheepState, subtasks: list[SubtaskModel]) -> int:
    """argmax_a Q_GA(s, a), lowest action index on ties."""
    return int(np.argmax(goal_averaging_row(state, subtasks)))


def ga_prior(state: SheepState, action: int, subtasks: list[SubtaskModel]) -> tuple[int, float]:
    return 1, goal_averaging(state, action, subtasks)


# -- compiled kernel --------------------------------------------------------------

_kernel_spec = [
    ("dist", nb.int64[:, :]),
    ("player_moves", nb.int64[:, :]),
    ("npc_moves", nb.int64[:, :]),
    ("pen", nb.int64),
    ("flee_radius", nb.int64),
    ("shoot_range", nb.int64),
    ("n_cells", nb.int64),
    ("q_sheep", nb.float64[:, :]),
    ("q_ghost", nb.float64[:, :]),
    ("cand", nb.int64[:]),
    ("discount", nb.float64),
]


@jitclass(_kernel_spec)
class SheepKernel:
    """Packed-state twin of :class:`SheepModel`; guide 0 and prior 0 are GoalAveraging."""

    def __init__(self, dist, player_moves, npc_moves, pen, flee_radius, shoot_range, q_sheep, q_ghost, discount):
        self.dist = dist
        self.player_moves = player_moves
        self.npc_moves = npc_moves
        self.pen = pen
        self.flee_radius = flee_radius
        self.shoot_range = shoot_range
        self.n_cells = dist.shape[0]
        self.q_sheep = q_sheep
        self.q_ghost = q_ghost
        self.cand = np.empty(5, np.int64)
        self.discount = discount

    def num_actions(self, s):
        return 0 if (s >> 34) & 3 else 30

    def action_at(self, s, i):
        return i

    def is_terminal(self, s):
        return (s >> 34) & 3 != 0

    def _npc(self, pos, sh, dog, target, chase, rng):
        # target < 0: nothing to chase or avoid besides the players
        d = self.dist
        near = min(d[pos, sh], d[pos, dog]) <= self.flee_radius
        if not near and target < 0:
            return pos
        best = -(1 << 30)
        count = 0
        for k in range(5):
            c = self.npc_moves[pos, k]
            if c < 0:
                continue
            if near:
                sc = min(d[c, sh], d[c, dog])
            elif chase:
                sc = -d[c, target]
            else:
                sc = d[c, target]
            if sc > best:
                best = sc
                count = 0
            if sc == best:
                self.cand[count] = c
                count += 1
        if count == 1:
            return self.cand[0]
        return self.cand[min(int(rng.random() * count), count - 1)]

    def sample(self, s, a, rng):
        sh = s & 63
        dog = (s >> 6) & 63
        sheep = (s >> 12) & 63
        g1 = (s >> 18) & 63
        g2 = (s >> 24) & 63
        h1 = (s >> 30) & 3
        h2 = (s >> 32) & 3
        sp = a // 5
        dp = a % 5
        if sp != 5:
            sh = self.player_moves[sh, sp]
        dog = self.player_moves[dog, dp]
        reward = 0.0
        if sp == 5:
            best = self.shoot_range + 1
            t = -1
            if h1 > 0 and self.dist[sh, g1] < best:
                best = self.dist[sh, g1]
                t = 0
            if h2 > 0 and self.dist[sh, g2] < best:
                t = 1
            if t == 0:
                h1 -= 1
                if h1 == 0:
                    g1 = 0
                    reward += 5.0
            elif t == 1:
                h2 -= 1
                if h2 == 0:
                    g2 = 0
                    reward += 5.0
        # the sheep avoids the nearest living ghost: score by the min distance
        if h1 > 0 and h2 > 0:
            sheep = self._sheep_move(sheep, sh, dog, g1, g2, rng)
        elif h1 > 0:
            sheep = self._npc(sheep, sh, dog, g1, False, rng)
        elif h2 > 0:
            sheep = self._npc(sheep, sh, dog, g2, False, rng)
        else:
            sheep = self._npc(sheep, sh, dog, -1, False, rng)
        if h1 > 0:
            g1 = self._npc(g1, sh, dog, sheep, True, rng)
        if h2 > 0:
            g2 = self._npc(g2, sh, dog, sheep, True, rng)
        cause = 0
        if (h1 > 0 and g1 == sheep) or (h2 > 0 and g2 == sheep):
            cause = 2
            reward -= 10.0
        elif sheep == self.pen:
            cause = 1
            reward += 10.0
        s2 = sh | dog << 6 | sheep << 12 | g1 << 18 | g2 << 24 | h1 << 30 | h2 << 32 | cause << 34
        return s2, reward

    def _sheep_move(self, pos, sh, dog, g1, g2, rng):
        d = self.dist
        near = min(d[pos, sh], d[pos, dog]) <= self.flee_radius
        best = -(1 << 30)
        count = 0
        for k in range(5):
            c = self.npc_moves[pos, k]
            if c < 0:
                continue
            if near:
                sc = min(d[c, sh], d[c, dog])
            else:
                sc = min(d[c, g1], d[c, g2])
            if sc > best:
                best = sc
                count = 0
            if sc == best:
                self.cand[count] = c
                count += 1
        if count == 1:
            return self.cand[0]
        return self.cand[min(int(rng.random() * count), count - 1)]

    def ga_row_value(self, s, a):
        C = self.n_cells
        sh = s & 63
        dog = (s >> 6) & 63
        base = (sh * C + dog) * C
        total = self.q_sheep[base + ((s >> 12) & 63), a]
        C3 = C * C * C
        h1 = (s >> 30) & 3
        h2 = (s >> 32) & 3
        if h1 > 0:
            total += self.q_ghost[(h1 - 1) * C3 + base + ((s >> 18) & 63), a]
        if h2 > 0:
            total += self.q_ghost[(h2 - 1) * C3 + base + ((s >> 24) & 63), a]
        return total / 3.0

    def guide(self, s, g):
        best = -np.inf
        arg = 0
        for a in range(30):
            v = self.ga_row_value(s, a)
            if v > best:
                best = v
                arg = a
        return arg

    def prior_q(self, s, a, p):
        return self.ga_row_value(s, a)


class SheepProblem:
    """A maze with its solved subtasks, heuristic policies and compiled kernel."""

    def __init__(self, maze: Maze, discount: float = DISCOUNT, subtasks: list[SubtaskModel] | None = None):
        self.maze = maze
        self.discount = discount
        self.subtasks = subtasks if subtasks is not None else build_subtasks(maze, discount)
        self.model = SheepModel(maze, discount)

    def ga_policy(self) -> GreedyPolicy:
        subtasks = self.subtasks
        return GreedyPolicy(lambda s: ga_action(s, subtasks), name="ga")

    def ga_prior(self) -> PriorValue:
        subtasks = self.subtasks
        return PriorValue(lambda s, a: goal_averaging(s, a, subtasks), n=1, name="ga")

    def random_policy(self) -> UniformPolicy:
        return UniformPolicy()

    def kernel(self) -> SheepKernel:
        m = self.maze
        return SheepKernel(m.dist, m.player_moves, m.npc_moves, m.pen_cell, m.flee_radius, m.shoot_range,
                           np.ascontiguousarray(self.subtasks[0].q), np.ascontiguousarray(self.subtasks[1].q),
                           float(self.discount))

    def fast_model(self, config=None):
        """Compiled model; the only guide and prior it knows are named ``"ga"``."""
        from .uct.fast import FastModel

        return FastModel(self.kernel(), max_actions=N_ACTIONS, guides={"ga": 0}, priors={"ga": 0})
