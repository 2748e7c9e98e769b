"""UCT planning with heuristic bootstrapping: priors, guided rollouts and auxiliary arms."""
from .mdp import (
    DomainError,
    GenerativeModel,
    GreedyPolicy,
    MixturePolicy,
    Policy,
    PriorValue,
    Streams,
    TabularMdp,
    TabularModel,
    TabularPolicy,
    TrialRecord,
    UniformPolicy,
    discounted_return,
    make_streams,
    run_policy,
)
from .solver import SolveResult, extract_greedy, stochastic_optimal, value_iteration
from .uct import SearchConfig, plan_episode, search

__version__ = "0.1.0"
