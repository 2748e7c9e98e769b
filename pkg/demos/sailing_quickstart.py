"""
Sailing quickstart
==================

Generate an obstructed sailing map, solve it exactly, and watch plain UCT
and UCT with SailTowardsGoal auxiliary arms sail the same start.
"""

# %%
# A random 20x20 map
# ------------------
# Each cell is blocked with probability 0.4; maps whose goal cannot be reached
# are redrawn.

import numpy as np

from uctaux import make_streams
from uctaux.harness import sailing_problem
from uctaux.sailing import format_map, generate_map, random_start
from uctaux.uct import SearchConfig
from uctaux.uct.fast import fast_plan_episode, fast_run_policy

smap = generate_map(20, 20, 0.4, (2, 2), (17, 17), np.random.default_rng(7))
print(format_map(smap))

# %%
# Exact values
# ------------
# Value iteration over every (cell, heading, previous wind, wind) tuple gives
# the optimal policy the Optimal baseline follows.

prob = sailing_problem(smap)
sol = prob.solution
print(f"{prob.mdp.n_states} states solved in {sol.iterations} sweeps (residual {sol.residual:.1e})")

start = random_start(smap, np.random.default_rng(1))
s0 = prob.index.index(start)
print("start", start, "V* =", round(float(sol.v[s0]), 2))

# %%
# Baselines
# ---------

stg, opt = prob.stg_policy(), prob.optimal_policy()
fm = prob.fast_model(SearchConfig(1.0, 1, 1, rollout_policy=stg, aux_policy=opt))
for name, policy in (("SailTowardsGoal", stg), ("Optimal", opt)):
    rets = [fast_run_policy(fm, policy, s0, 300, make_streams(i))[0] for i in range(200)]
    print(f"{name:16s} mean return {np.mean(rets):8.2f}")

# %%
# Planning
# --------
# Same exploration constant and horizon for both planners; the auxiliary arm
# replays SailTowardsGoal from wherever it is picked.  Five episodes from one
# start are noisy; ``uctaux run`` averages over many maps and starts.

for label, cfg in (
    ("UCT", SearchConfig(700.0, 300, 1000)),
    ("UCT-Aux(STG)", SearchConfig(700.0, 300, 1000, aux_policy=stg)),
):
    fm = prob.fast_model(cfg)
    recs = [fast_plan_episode(fm, s0, cfg, 300, make_streams(100 + i)) for i in range(5)]
    print(f"{label:14s} return {np.mean([r.ret for r in recs]):8.2f}   nodes/search {np.mean([r.tree_nodes for r in recs]):7.0f}")
