"""
How extreme is a heuristic?
===========================

Normalize each heuristic episode between Random (0) and Optimal (1) on the
same map and start, then bin the scores.  SailTowardsGoal piles up at both
ends; StochasticOptimal.0.2 sits in between.
"""

# %%
# Baseline episodes over many maps
# --------------------------------

from uctaux import harness

spec = harness.ExperimentSpec.from_dict(dict(
    domain="sailing", agents=["Random", "Optimal", "Heuristic(STG)", "Heuristic(SO0.2)"],
    budgets=[1], instances=20, trials=5, seed=11,
))
records, errors = harness.run_experiment(spec)
print(f"{len(records)} episodes, {len(errors)} errors")

# %%
# Histograms
# ----------

rnd = harness.records_by_agent(records, "Random")
opt = harness.records_by_agent(records, "Optimal")
for label in ("Heuristic(STG)", "Heuristic(SO0.2)"):
    hist = harness.histogram_heuristic(harness.records_by_agent(records, label), rnd, opt, bins=10)
    print(label)
    for lo, c in zip(hist.edges[:-1], hist.counts):
        print(f"  {lo:.1f} {'#' * int(c)}")
