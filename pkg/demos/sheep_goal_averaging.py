"""
Sheep Savior and GoalAveraging
==============================

Solve the three single-character subtasks of the reference maze, average
their Q-values into the GoalAveraging heuristic, and compare it with
random play and with UCT-Aux.
"""

# %%
# The maze
# --------
# ``1`` shepherd, ``2`` dog, ``s`` sheep, ``g`` ghosts, ``P`` pen.

import numpy as np

from uctaux import UniformPolicy, make_streams
from uctaux.harness import sheep_problem
from uctaux.sheep import REFERENCE_MAZE, action_name, ga_action, pack, random_start, reference_maze, sheep_step
from uctaux.uct import SearchConfig
from uctaux.uct.fast import fast_plan_episode, fast_run_policy

print(REFERENCE_MAZE)
maze = reference_maze()
prob = sheep_problem(maze)
for t in prob.subtasks[:2]:
    print(f"{t.kind} subtask: {t.mdp.n_states} states, {t.solution.iterations} sweeps")

# %%
# One GoalAveraging episode
# -------------------------

state = random_start(maze, np.random.default_rng(3))
rng = np.random.default_rng(0)
for step in range(12):
    a = ga_action(state, prob.subtasks)
    state, r = sheep_step(state, a, maze, rng)
    print(f"{step:2d} {action_name(a):14s} reward {r:+5.1f}  hp {state.hp}  cause {state.cause}")
    if state.cause:
        break

# %%
# Heuristic against random play
# -----------------------------

fm = prob.fast_model()
starts = [pack(random_start(maze, np.random.default_rng(i))) for i in range(200)]
for name, policy in (("Random", UniformPolicy()), ("GoalAveraging", prob.ga_policy())):
    rets = [fast_run_policy(fm, policy, s, 300, make_streams(i))[0] for i, s in enumerate(starts)]
    print(f"{name:14s} {np.mean(rets):6.2f} ± {np.std(rets, ddof=1) / np.sqrt(len(rets)):.2f}")

# %%
# Planning with 200 rollouts
# --------------------------

for label, cfg in (
    ("UCT", SearchConfig(10.0, 300, 200)),
    ("UCT-Aux(GA)", SearchConfig(10.0, 300, 200, aux_policy=prob.ga_policy())),
):
    rets = [fast_plan_episode(fm, s, cfg, 300, make_streams(i)).ret for i, s in enumerate(starts[:40])]
    print(f"{label:12s} {np.mean(rets):6.2f}")
