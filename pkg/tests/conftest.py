import numpy as np
import pytest
from hypothesis import settings

from uctaux.mdp import TabularMdp

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_mdp(seed, n_states=12, n_actions=3, branching=3, discount=0.9, drop=0.2, terminal=(0,)):
    """Random MDP with a few invalid pairs and one absorbing terminal state."""
    rng = np.random.default_rng(seed)
    outcomes = {}
    for s in range(n_states):
        if s in terminal:
            continue
        for a in range(n_actions):
            if a > 0 and rng.random() < drop:
                continue
            nxt = rng.choice(n_states, size=min(branching, n_states), replace=False)
            p = rng.dirichlet(np.ones(nxt.size))
            outcomes[(s, a)] = [(int(n), float(q), float(rng.normal())) for n, q in zip(nxt, p)]
    return TabularMdp.from_outcomes(n_states, n_actions, outcomes, discount, terminal=terminal)


@pytest.fixture
def small_mdp():
    return random_mdp(7)


@pytest.fixture
def chain_mdp():
    """s0 -a0-> s1 (r=1), s0 -a1-> s0 (r=0.5), s1 -a0-> terminal s2 (r=2)."""
    return TabularMdp.from_outcomes(
        3, 2,
        {(0, 0): [(1, 1.0, 1.0)], (0, 1): [(0, 1.0, 0.5)], (1, 0): [(2, 1.0, 2.0)]},
        discount=0.9, terminal=[2],
    )


@pytest.fixture(scope="session", autouse=True)
def solve_cache(tmp_path_factory):
    """Share value-iteration results across tests unless a cache dir is already configured."""
    import os

    from uctaux.harness import CACHE_ENV

    if os.environ.get(CACHE_ENV):
        yield os.environ[CACHE_ENV]
        return
    path = str(tmp_path_factory.mktemp("solve-cache"))
    os.environ[CACHE_ENV] = path
    yield path
    del os.environ[CACHE_ENV]


@pytest.fixture(scope="session")
def reference_sheep(solve_cache):
    from uctaux.harness import _sheep_problem

    return _sheep_problem("reference", 0.99)


@pytest.fixture(scope="session")
def choke_sheep(solve_cache):
    from uctaux.harness import _sheep_problem

    return _sheep_problem("choke", 0.99)


ACCEPTANCE = {}


@pytest.fixture
def report():
    """Record one acceptance line: ``report(number, passed, detail)``."""

    def _report(number, passed, detail):
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")

    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
