from types import SimpleNamespace

import numpy as np
import pytest

from uctaux.mdp import DomainError, UniformPolicy, make_streams, run_policy
from uctaux.sheep import (
    CHOKE_MAZE,
    DEAD,
    GHOST_REWARD,
    KILLED,
    N_ACTIONS,
    PEN_REWARD,
    PENNED,
    RUNNING,
    SHOOT,
    SheepModel,
    SheepState,
    action_name,
    compound,
    format_maze,
    ga_action,
    ga_prior,
    goal_averaging,
    npc_move,
    pack,
    parse_maze,
    random_start,
    reference_maze,
    sheep_step,
    split,
    unpack,
)
from uctaux.uct.fast import fast_run_policy

STAY, N, S, E, W = range(5)

# Sheep sits between the pen (west) and the shepherd (east); the corridor below is walled.
CORRIDOR = parse_maze(
    "#######\n"
    "#Ps1..#\n"
    "###.###\n"
    "#2...g#\n"
    "#g....#\n"
    "#######\n"
)


def at(maze, x, y):
    return maze.index((x, y))


def test_compound_actions():
    assert N_ACTIONS == 30
    assert {split(compound(s, d)) for s in range(6) for d in range(5)} == {(s, d) for s in range(6) for d in range(5)}
    assert action_name(compound(SHOOT, W)) == "shoot+W"


def test_maze_round_trip():
    m = reference_maze()
    assert m.n_cells == 40 and format_maze(parse_maze(format_maze(m))) == format_maze(m)
    assert parse_maze(CHOKE_MAZE).n_cells == 36
    with pytest.raises(DomainError):
        parse_maze("#####\n#P#1#\n#s#2#\n#g#g#\n#####\n")


def test_sheep_into_pen():
    m = CORRIDOR
    state = m.start_state()
    nxt, r = sheep_step(state, compound(STAY, STAY), m, np.random.default_rng(0))
    assert nxt.sheep == m.pen_cell
    assert r == PEN_REWARD and nxt.cause == PENNED


def test_shoot_kills_weakened_ghost():
    m = CORRIDOR
    state = SheepState(at(m, 3, 3), at(m, 1, 3), at(m, 5, 1), (at(m, 4, 3), at(m, 5, 4)), (1, 2))
    nxt, r = sheep_step(state, compound(SHOOT, STAY), m, np.random.default_rng(0))
    assert r == GHOST_REWARD
    assert nxt.hp == (0, 2) and nxt.ghosts[0] == DEAD


def test_shoot_prefers_nearest_then_lower_index():
    m = CORRIDOR
    shooter = at(m, 3, 3)
    state = SheepState(shooter, at(m, 1, 1), at(m, 5, 1), (at(m, 2, 3), at(m, 4, 3)), (2, 2))
    nxt, r = sheep_step(state, compound(SHOOT, STAY), m, np.random.default_rng(0))
    assert nxt.hp == (1, 2) and r == 0.0


def test_quiet_step_pays_nothing():
    m = reference_maze()
    state = SheepState(at(m, 1, 1), at(m, 2, 1), at(m, 7, 5), (at(m, 1, 7), at(m, 3, 7)), (2, 2))
    nxt, r = sheep_step(state, compound(STAY, STAY), m, np.random.default_rng(0))
    assert r == 0.0 and nxt.cause == RUNNING


def test_blocked_player_move_becomes_no_move():
    m = CORRIDOR
    state = m.start_state()
    nxt, _ = sheep_step(state, compound(N, N), m, np.random.default_rng(0))
    assert (nxt.shepherd, nxt.dog) == (state.shepherd, state.dog)


def test_ghost_steps_onto_sheep():
    m = reference_maze()
    state = SheepState(at(m, 1, 1), at(m, 1, 3), at(m, 5, 5), (at(m, 6, 5), at(m, 7, 7)), (2, 2))
    assert npc_move("ghost", state, m, np.random.default_rng(0), ghost=0) == state.sheep


def test_cornered_sheep_is_killed():
    # the sheep moves first but the dead end leaves it nowhere to go
    m = CORRIDOR
    state = SheepState(at(m, 1, 4), at(m, 2, 4), at(m, 5, 1), (at(m, 4, 1), at(m, 5, 3)), (2, 2))
    nxt, r = sheep_step(state, compound(STAY, STAY), m, np.random.default_rng(0))
    assert nxt.sheep == state.sheep
    assert nxt.cause == KILLED and r == -10.0


def test_sheep_takes_unique_escape():
    m = CORRIDOR
    state = SheepState(at(m, 5, 1), at(m, 1, 4), at(m, 3, 1), (at(m, 5, 4), at(m, 3, 4)), (2, 2))
    # shepherd two steps east: only west or south gain distance; west reaches 2 while south meets the ghosts
    assert npc_move("sheep", state, m, np.random.default_rng(0)) == at(m, 2, 1)


def test_cornered_npc_stays_put():
    # the ghost sits at the end of a dead end with the shepherd approaching
    m = parse_maze("#######\n#g.1..#\n###.###\n#2..P.#\n#s...g#\n#######\n")
    state = m.start_state()
    assert npc_move("ghost", state, m, np.random.default_rng(0), ghost=0) == at(m, 1, 1)


def test_ties_are_uniform():
    m = reference_maze()
    # ghost two cells north of the sheep at a junction: two shortest approaches would tie if offered
    state = SheepState(at(m, 1, 1), at(m, 2, 1), at(m, 3, 5), (at(m, 5, 3), at(m, 7, 7)), (2, 2))
    rng = np.random.default_rng(1)
    moves = [npc_move("ghost", state, m, rng, ghost=0) for _ in range(2000)]
    picks, counts = np.unique(moves, return_counts=True)
    assert set(picks) == {at(m, 4, 3), at(m, 5, 4)}
    assert abs(counts[0] / 2000 - 0.5) < 0.05


def test_reward_decomposition_and_absorption():
    m = reference_maze()
    model = SheepModel(m)
    rng = np.random.default_rng(0)
    for ep in range(150):
        s = random_start(m, rng)
        for _ in range(200):
            a = int(rng.integers(N_ACTIONS))
            nxt, r = model.sample(s, a, rng)
            deaths = sum(h0 > 0 and h1 == 0 for h0, h1 in zip(s.hp, nxt.hp))
            expected = GHOST_REWARD * deaths + PEN_REWARD * (nxt.cause == PENNED) - 10.0 * (nxt.cause == KILLED)
            assert r == expected
            s = nxt
            if model.is_terminal(s):
                assert model.actions(s) == []
                with pytest.raises(DomainError):
                    sheep_step(s, 0, m, rng)
                break


def test_pack_round_trip():
    m = reference_maze()
    rng = np.random.default_rng(2)
    for _ in range(200):
        s = random_start(m, rng)
        s = s._replace(hp=(int(rng.integers(3)), int(rng.integers(1, 3))))
        s = s._replace(ghosts=(DEAD if s.hp[0] == 0 else s.ghosts[0], s.ghosts[1]))
        assert unpack(pack(s)) == s


def test_random_start_respects_gap():
    m = reference_maze()
    rng = np.random.default_rng(3)
    for _ in range(100):
        s = random_start(m, rng)
        assert len({s.shepherd, s.dog, s.sheep, *s.ghosts}) == 5
        assert min(m.dist[s.sheep, g] for g in s.ghosts) >= 5
        assert m.pen_cell not in (s.shepherd, s.dog, s.sheep, *s.ghosts)


def test_subtask_sizes(reference_sheep):
    C = reference_sheep.maze.n_cells
    sheep_t, g1, g2 = reference_sheep.subtasks
    assert sheep_t.mdp.n_states == C**3
    assert g1.mdp.n_states == 2 * C**3 + 1 <= 3 * C**3
    assert g1.q is g2.q
    assert sheep_t.solution.residual <= 1e-6 and g1.solution.residual <= 1e-6


def test_subtask_models_are_consistent(reference_sheep):
    for t in reference_sheep.subtasks[:2]:
        t.mdp.check()
        term = t.mdp.terminal
        assert not t.mdp.action_mask[term].any()
        assert np.all(t.q[term] == 0.0)


def test_projection(reference_sheep):
    m = reference_sheep.maze
    C = m.n_cells
    rng = np.random.default_rng(4)
    sheep_t, g1, g2 = reference_sheep.subtasks
    for _ in range(100):
        s = random_start(m, rng)._replace(hp=(1, 2))
        i = sheep_t.project(s)
        assert np.unravel_index(i, (C, C, C)) == (s.shepherd, s.dog, s.sheep)
        j = g1.project(s)
        assert j < C**3 and np.unravel_index(j, (C, C, C)) == (s.shepherd, s.dog, s.ghosts[0])
        assert g2.project(s) == C**3 + (s.shepherd * C + s.dog) * C + s.ghosts[1]
        assert g1.project(unpack(pack(s))) == j
    dead = s._replace(ghosts=(DEAD, s.ghosts[1]), hp=(0, 2))
    assert g1.project(dead) == 2 * C**3


def test_ghost_subtask_transition_matches_step(reference_sheep):
    m = reference_sheep.maze
    g = reference_sheep.subtasks[1]
    C = m.n_cells
    s = SheepState(at(m, 3, 3), at(m, 1, 1), DEAD, (at(m, 3, 4), at(m, 7, 7)), (1, 0))
    outs = g.mdp.outcomes(g.project(s), compound(SHOOT, STAY))
    assert outs == [(2 * C**3, 1.0, GHOST_REWARD)]


def test_goal_averaging_is_a_mean():
    stubs = [SimpleNamespace(q=np.array([[v, 0.0]]), project=lambda s: 0) for v in (3.0, 6.0, 9.0)]
    assert goal_averaging(None, 0, stubs) == 6.0


def test_goal_averaging_of_finished_subtasks_is_zero(reference_sheep):
    m = reference_sheep.maze
    s = SheepState(at(m, 1, 1), at(m, 2, 1), m.pen_cell, (DEAD, DEAD), (0, 0))
    assert all(goal_averaging(s, a, reference_sheep.subtasks) == 0.0 for a in range(N_ACTIONS))


def test_ga_prior_and_policy(reference_sheep):
    subtasks = reference_sheep.subtasks
    rng = np.random.default_rng(5)
    lo = min(float(t.q.min()) for t in subtasks)
    hi = max(float(t.q.max()) for t in subtasks)
    for _ in range(50):
        s = random_start(reference_sheep.maze, rng)
        row = [goal_averaging(s, a, subtasks) for a in range(N_ACTIONS)]
        for a in range(N_ACTIONS):
            n, q = ga_prior(s, a, subtasks)
            assert n == 1 and q == row[a] and lo <= q <= hi
        assert ga_action(s, subtasks) == int(np.argmax(row))


def test_kernel_matches_python_model(reference_sheep):
    prob = reference_sheep
    k = prob.kernel()
    model = SheepModel(prob.maze)
    pick = np.random.default_rng(6)
    for ep in range(60):
        rng_a, rng_b = np.random.default_rng(ep), np.random.default_rng(ep)
        s = random_start(prob.maze, pick)
        for _ in range(100):
            if model.is_terminal(s):
                assert k.is_terminal(pack(s))
                break
            a = int(pick.integers(N_ACTIONS))
            assert k.guide(pack(s), 0) == ga_action(s, prob.subtasks)
            assert k.prior_q(pack(s), a, 0) == pytest.approx(goal_averaging(s, a, prob.subtasks), abs=1e-12)
            i = pack(s)
            s, r = model.sample(s, a, rng_a)
            j, r2 = k.sample(i, a, rng_b)
            assert (j, r2) == (pack(s), r)


def test_goal_averaging_beats_random(reference_sheep):
    prob = reference_sheep
    fm = prob.fast_model()
    rng = np.random.default_rng(7)
    starts = [pack(random_start(prob.maze, rng)) for _ in range(200)]
    ga = [fast_run_policy(fm, prob.ga_policy(), s, 300, make_streams(i))[0] for i, s in enumerate(starts)]
    rand = [fast_run_policy(fm, UniformPolicy(), s, 300, make_streams(i))[0] for i, s in enumerate(starts)]
    sem = lambda x: np.std(x, ddof=1) / np.sqrt(len(x))
    assert np.mean(ga) - sem(ga) > np.mean(rand) + sem(rand)


def test_goal_averaging_sometimes_loses_the_sheep(choke_sheep):
    prob = choke_sheep
    model = SheepModel(prob.maze)
    rng = np.random.default_rng(8)
    killed = 0
    for ep in range(200):
        s = random_start(prob.maze, rng)
        streams = make_streams(ep)
        for _ in range(300):
            if model.is_terminal(s):
                break
            s, _ = model.sample(s, ga_action(s, prob.subtasks), streams.env)
        killed += s.cause == KILLED
    assert killed > 0
