"""Seeded experiment batches: agents, trials, aggregation, histograms and CSV files.

Seeds
-----
Every random source of a trial is a :class:`numpy.random.SeedSequence` with
the experiment's root seed as entropy and a spawn key naming its purpose::

    map        (0, instance)
    start      (1, instance, trial)
    environment(2, instance, trial)
    agent      (3, instance, trial, crc32(agent label), budget)

SeedSequence hashes entropy and key with a fixed 32-bit mixing function, so
the streams are the same on every machine.  The map, the start state and the
environment stream do not depend on the agent, so every agent in a
(instance, trial) cell faces the same situation and, as long as they act
alike, the same weather.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import re
import time
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Iterable, Iterator

import numpy as np

from . import sailing, sheep
from .mdp import DomainError, MixturePolicy, Streams, TrialRecord, UniformPolicy
from .solver import SolveResult, load_npz, save_npz, value_iteration
from .uct.fast import fast_plan_episode, fast_run_policy
from .uct.tree import SearchConfig

log = logging.getLogger(__name__)

CACHE_ENV = "UCTAUX_CACHE"

BASELINES = ("Random", "Optimal", "Heuristic")
SEARCHERS = ("UCT", "UCT-I", "UCT-S", "UCT-IS", "UCT-Aux", "UCT-Aux-I", "UCT-Aux-S", "UCT-Aux-IS")
AGENT_KINDS = BASELINES + SEARCHERS
ROLES = ("prior", "rollout", "aux", "heuristic")

HEURISTIC_ALIASES = {"stg": "SailTowardsGoal", "sailtowardsgoal": "SailTowardsGoal",
                     "ga": "GoalAveraging", "goalaveraging": "GoalAveraging"}

SAILING_DEFAULT_BUDGETS = [250, 500, 1000, 2000, 4000, 8000, 16000]
SHEEP_DEFAULT_BUDGETS = [200, 500, 1000, 2000, 5000, 10000]


def canonical_heuristic(name: str) -> str:
    """Canonical heuristic name; accepts ``STG``, ``GA``, ``SO0.2`` and the long forms."""
    key = name.strip().lower()
    if key in HEURISTIC_ALIASES:
        return HEURISTIC_ALIASES[key]
    m = re.fullmatch(r"(?:so|stochasticoptimal\.?)([0-9.]+)", key)
    if m:
        p = float(m.group(1))
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"StochasticOptimal weight {p} outside [0, 1]")
        return f"StochasticOptimal.{m.group(1)}"
    raise ValueError(f"unknown heuristic {name!r}")


@dataclass(frozen=True)
class AgentSpec:
    """An agent kind plus the heuristic it uses in each role it has.

    Written as ``Kind``, ``Kind(H)`` (``H`` in every role) or
    ``Kind(role=H, ...)``; the written form is the agent's label.
    """

    label: str
    kind: str
    heuristics: tuple[tuple[str, str], ...]

    def heuristic(self, role: str) -> str:
        return dict(self.heuristics)[role]

    @property
    def roles(self) -> tuple[str, ...]:
        return agent_roles(self.kind)


def agent_roles(kind: str) -> tuple[str, ...]:
    if kind == "Heuristic":
        return ("heuristic",)
    if kind in ("Random", "Optimal", "UCT"):
        return ()
    roles = []
    if kind.startswith("UCT-Aux"):
        roles.append("aux")
    suffix = kind.rsplit("-", 1)[1]
    if "I" in suffix and suffix != "Aux":
        roles.append("prior")
    if "S" in suffix:
        roles.append("rollout")
    return tuple(roles)


def parse_agent(text: str, defaults: dict[str, str]) -> AgentSpec:
    m = re.fullmatch(r"\s*([A-Za-z-]+)\s*(?:\((.*)\))?\s*", text)
    if not m or m.group(1) not in AGENT_KINDS:
        raise ValueError(f"unknown agent {text!r}; kinds are {', '.join(AGENT_KINDS)}")
    kind, args = m.group(1), m.group(2)
    chosen = {r: defaults.get(r) for r in agent_roles(kind)}
    if args:
        for part in args.split(","):
            if "=" in part:
                role, h = (t.strip() for t in part.split("=", 1))
                if role not in chosen:
                    raise ValueError(f"agent {kind} has no {role!r} role")
                chosen[role] = canonical_heuristic(h)
            else:
                for role in chosen:
                    chosen[role] = canonical_heuristic(part)
    for role, h in chosen.items():
        if h is None:
            raise ValueError(f"agent {text!r} needs a heuristic for its {role} role")
    return AgentSpec(text.strip(), kind, tuple(sorted(chosen.items())))


@dataclass
class ExperimentSpec:
    domain: str = "sailing"
    agents: list[str] = field(default_factory=lambda: ["UCT", "UCT-Aux"])
    heuristics: dict[str, str] = field(default_factory=dict)
    budgets: list[int] = field(default_factory=lambda: [1000])
    instances: int = 1
    trials: int = 1
    seed: int = 0
    width: int = 20
    height: int = 20
    obstacle_p: float = 0.4
    maze: str = "reference"
    exploration: float | None = None
    horizon: int = 300
    max_steps: int = 300
    discount: float = 0.99
    recommend: str = "q"

    def __post_init__(self):
        if self.domain not in ("sailing", "sheep"):
            raise ValueError(f"unknown domain {self.domain!r}")
        default = "GoalAveraging" if self.domain == "sheep" else "SailTowardsGoal"
        self.heuristics = {r: canonical_heuristic(self.heuristics.get(r, default)) for r in ROLES}
        if not self.budgets or any(b < 1 for b in self.budgets):
            raise ValueError("budgets must be positive")
        if any(b2 <= b1 for b1, b2 in zip(self.budgets, self.budgets[1:])):
            raise ValueError("budgets must be strictly increasing")
        if self.instances < 1 or self.trials < 1:
            raise ValueError("instances and trials must be at least 1")
        if self.exploration is None:
            self.exploration = (
                sailing.C_MAX / (1.0 - self.discount) if self.domain == "sailing" else SHEEP_EXPLORATION
            )
        labels = [a.label for a in self.agent_specs()]
        if len(set(labels)) != len(labels):
            raise ValueError("agent labels must be unique")
        for a in self.agent_specs():
            for role, h in a.heuristics:
                check_heuristic(self.domain, h)
            if a.kind == "Optimal" and self.domain == "sheep":
                raise ValueError("no Optimal agent for the sheep domain")

    def agent_specs(self) -> list[AgentSpec]:
        return [parse_agent(a, self.heuristics) for a in self.agents]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExperimentSpec:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | os.PathLike) -> ExperimentSpec:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


# Half the largest reachable return (two ghosts and the pen).
SHEEP_EXPLORATION = (2 * sheep.GHOST_REWARD + sheep.PEN_REWARD) / 2


def check_heuristic(domain: str, name: str) -> None:
    if domain == "sheep" and name != "GoalAveraging":
        raise ValueError(f"{name} is not available in the sheep domain")
    if domain == "sailing" and name == "GoalAveraging":
        raise ValueError("GoalAveraging is not available in the sailing domain")


def so_weight(name: str) -> float:
    return float(name.split(".", 1)[1])


# -- seeds ---------------------------------------------------------------------------


def seed_sequence(root: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=root, spawn_key=tuple(int(k) for k in key))


def agent_key(label: str) -> int:
    return zlib.crc32(label.encode())


def trial_streams(root: int, instance: int, trial: int, label: str, budget: int) -> Streams:
    model, policy, tie = (np.random.default_rng(s) for s in
                          seed_sequence(root, 3, instance, trial, agent_key(label), budget).spawn(3))
    env = np.random.default_rng(seed_sequence(root, 2, instance, trial))
    return Streams(model, policy, tie, env)


def start_rng(root: int, instance: int, trial: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root, 1, instance, trial))


def map_rng(root: int, instance: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(root, 0, instance))


# -- cache ------------------------------------------------------------------------------


def cache_dir() -> str | None:
    path = os.environ.get(CACHE_ENV)
    if path:
        os.makedirs(path, exist_ok=True)
    return path or None


def _digest(*parts: str) -> str:
    return hashlib.sha1("\n".join(parts).encode()).hexdigest()[:16]


def cached_solve(key: str, build, tolerance: float = 1e-6) -> SolveResult:
    """Value iteration on ``build()``, cached as ``<cache>/<key>.npz`` when a cache dir is set."""
    root = cache_dir()
    path = os.path.join(root, f"{key}.npz") if root else None
    if path and os.path.exists(path):
        try:
            return load_npz(path)
        except (OSError, ValueError, KeyError) as exc:
            log.warning("ignoring unreadable cache file %s: %s", path, exc)
    result = value_iteration(build(), tolerance)
    if path:
        save_npz(result, path)
    return result


def sailing_problem(smap: sailing.SailingMap, discount: float = sailing.DISCOUNT) -> sailing.SailingProblem:
    prob = sailing.SailingProblem(smap, discount)
    key = "sail-" + _digest(sailing.format_map(smap), repr(discount))
    prob._solution = cached_solve(key, lambda: prob.mdp)
    return prob


def sheep_problem(maze: sheep.Maze, discount: float = sheep.DISCOUNT) -> sheep.SheepProblem:
    text = sheep.format_maze(maze) + f"{maze.flee_radius} {maze.shoot_range} {discount!r}"
    flee = sheep._flee_outcomes(maze)
    sols = (
        cached_solve("sheep-s-" + _digest(text), lambda: sheep.sheep_subtask_mdp(maze, discount, flee)),
        cached_solve("sheep-g-" + _digest(text), lambda: sheep.ghost_subtask_mdp(maze, discount, flee)),
    )
    return sheep.SheepProblem(maze, discount, sheep.build_subtasks(maze, discount, solutions=sols))


def load_maze(name: str) -> sheep.Maze:
    if name in sheep.MAZES:
        return sheep.parse_maze(sheep.MAZES[name])
    return sheep.read_maze(name)


def make_sailing_map(spec: ExperimentSpec, instance: int) -> sailing.SailingMap:
    start, goal = sailing.default_corners(spec.width, spec.height)
    return sailing.generate_map(spec.width, spec.height, spec.obstacle_p, start, goal, map_rng(spec.seed, instance))


# -- agents --------------------------------------------------------------------------


class Domain:
    """One problem instance: start states, heuristic objects and the compiled model."""

    def __init__(self, spec: ExperimentSpec, instance: int):
        self.spec = spec
        if spec.domain == "sailing":
            self.problem = sailing_problem(make_sailing_map(spec, instance), spec.discount)
        else:
            self.problem = _sheep_problem(spec.maze, spec.discount)

    def start(self, trial_rng: np.random.Generator) -> int:
        if self.spec.domain == "sailing":
            p = self.problem
            return p.index.index(sailing.random_start(p.map, trial_rng))
        return sheep.pack(sheep.random_start(self.problem.maze, trial_rng))

    def policy(self, role: str, name: str):
        p = self.problem
        if name == "GoalAveraging":
            return p.ga_policy()
        if name == "SailTowardsGoal":
            # heuristic rollouts follow argmax Q_STG; aux arms and the baseline follow the bearing rule
            return p.stg_greedy_policy() if role == "rollout" else p.stg_policy()
        return MixturePolicy(p.optimal_policy(), so_weight(name))

    def prior(self, name: str):
        p = self.problem
        if name == "GoalAveraging":
            return p.ga_prior()
        if name == "SailTowardsGoal":
            return p.stg_prior()
        return p.mixture_prior(so_weight(name))

    def search_config(self, agent: AgentSpec, budget: int) -> SearchConfig:
        h = dict(agent.heuristics)
        return SearchConfig(
            exploration=self.spec.exploration,
            horizon=self.spec.horizon,
            budget=budget,
            prior=self.prior(h["prior"]) if "prior" in h else None,
            rollout_policy=self.policy("rollout", h["rollout"]) if "rollout" in h else UniformPolicy(),
            aux_policy=self.policy("aux", h["aux"]) if "aux" in h else None,
            recommend=self.spec.recommend,
        )

    def baseline_policy(self, agent: AgentSpec):
        if agent.kind == "Random":
            return UniformPolicy()
        if agent.kind == "Optimal":
            return self.problem.optimal_policy()
        return self.policy("heuristic", agent.heuristic("heuristic"))

    def fast_model(self, config: SearchConfig | None = None, policy=None):
        if config is None:
            config = SearchConfig(1.0, 1, 1, rollout_policy=policy or UniformPolicy())
        return self.problem.fast_model(config)


@lru_cache(maxsize=4)
def _sheep_problem(maze: str, discount: float) -> sheep.SheepProblem:
    return sheep_problem(load_maze(maze), discount)


def run_cell(domain: Domain, agent: AgentSpec, instance: int, trial: int, budget: int) -> TrialRecord:
    spec = domain.spec
    start = domain.start(start_rng(spec.seed, instance, trial))
    streams = trial_streams(spec.seed, instance, trial, agent.label, budget)
    if agent.kind in BASELINES:
        policy = domain.baseline_policy(agent)
        fm = domain.fast_model(policy=policy)
        t0 = time.perf_counter()
        # baselines act directly in the environment stream
        ret, steps = fast_run_policy(fm, policy, start, spec.max_steps, streams._replace(model=streams.env))
        rec = TrialRecord(ret=ret, steps=steps, wall_ms=(time.perf_counter() - t0) * 1000.0)
    else:
        config = domain.search_config(agent, budget)
        rec = fast_plan_episode(domain.fast_model(config), start, config, spec.max_steps, streams)
    rec.agent, rec.instance, rec.trial, rec.budget = agent.label, instance, trial, budget
    return rec


def run_experiment(spec: ExperimentSpec, progress=None) -> tuple[list[TrialRecord], list[TrialRecord]]:
    """Run every (agent, instance, trial, budget) cell; return ``(records, errors)`` in canonical order.

    A failing cell becomes an error row instead of aborting the batch.
    Baselines ignore the budget, so they run once per (instance, trial) and
    their record is repeated under each budget.
    """
    agents = spec.agent_specs()
    records, errors = [], []
    for instance in range(spec.instances):
        try:
            domain = Domain(spec, instance)
        except Exception as exc:  # noqa: BLE001 - reported per cell
            for a in agents:
                for t in range(spec.trials):
                    for b in spec.budgets:
                        errors.append(_error_row(a.label, instance, t, b, exc))
            continue
        for a in agents:
            for t in range(spec.trials):
                baseline = None
                for b in spec.budgets:
                    try:
                        if a.kind in BASELINES and baseline is not None:
                            rec = dataclasses.replace(baseline, budget=b)
                        else:
                            rec = run_cell(domain, a, instance, t, b)
                            baseline = rec if a.kind in BASELINES else None
                        records.append(rec)
                    except Exception as exc:  # noqa: BLE001
                        log.warning("cell %s/%d/%d/%d failed: %s", a.label, instance, t, b, exc)
                        errors.append(_error_row(a.label, instance, t, b, exc))
                    if progress:
                        progress(a.label, instance, t, b)
    key = lambda r: (r.agent, r.instance, r.trial, r.budget)
    return sorted(records, key=key), sorted(errors, key=key)


def _error_row(label, instance, trial, budget, exc) -> TrialRecord:
    return TrialRecord(agent=label, instance=instance, trial=trial, budget=budget, ret=math.nan,
                       error=f"{type(exc).__name__}: {exc}")


# -- aggregation -------------------------------------------------------------------------


@dataclass(frozen=True)
class Aggregate:
    agent: str
    budget: int
    mean_return: float
    sem: float | None  # None with fewer than two records
    mean_nodes: float
    n: int


def aggregate(records: Iterable[TrialRecord]) -> list[Aggregate]:
    """Mean return, standard error of the mean and mean tree nodes per (agent, budget)."""
    cells: dict[tuple[str, int], list[TrialRecord]] = {}
    for r in records:
        cells.setdefault((r.agent, r.budget), []).append(r)
    out = []
    for (agent, budget), rs in sorted(cells.items()):
        ret = np.array([r.ret for r in rs], dtype=float)
        sem = float(np.std(ret, ddof=1) / math.sqrt(ret.size)) if ret.size >= 2 else None
        out.append(Aggregate(agent, budget, float(ret.mean()), sem, float(np.mean([r.tree_nodes for r in rs])), ret.size))
    return out


def sem_intervals_separate(a: Aggregate, b: Aggregate) -> bool:
    """True when ``a`` lies above ``b`` with non-overlapping one-SEM intervals."""
    return a.mean_return - (a.sem or 0.0) > b.mean_return + (b.sem or 0.0)


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    skipped: int

    @property
    def frequencies(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total else self.counts.astype(float)


def normalized_scores(heuristic, random, optimal) -> tuple[np.ndarray, int]:
    """Per matched (instance, trial) cell: (h - rand) / (opt - rand); degenerate cells skipped."""
    h = {(r.instance, r.trial): r.ret for r in heuristic}
    rnd = {(r.instance, r.trial): r.ret for r in random}
    opt = {(r.instance, r.trial): r.ret for r in optimal}
    cells = sorted(set(h) & set(rnd) & set(opt))
    scores, skipped = [], 0
    for c in cells:
        span = opt[c] - rnd[c]
        if span <= 0:
            skipped += 1
            continue
        scores.append((h[c] - rnd[c]) / span)
    return np.array(scores), skipped


def histogram_heuristic(heuristic, random, optimal, bins: int = 10) -> Histogram:
    """Bin normalized scores into ``bins`` equal bins over [0, 1].

    Scores past either end, by any amount, land in the nearest extreme bin.
    """
    if bins < 1:
        raise ValueError("need at least one bin")
    scores, skipped = normalized_scores(heuristic, random, optimal)
    idx = np.clip(np.floor(np.clip(scores, 0.0, 1.0) * bins).astype(int), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return Histogram(np.linspace(0.0, 1.0, bins + 1), counts, skipped)


def records_by_agent(records: Iterable[TrialRecord], agent: str, budget: int | None = None) -> list[TrialRecord]:
    return [r for r in records if r.agent == agent and (budget is None or r.budget == budget)]


# -- CSV ---------------------------------------------------------------------------------

RECORD_COLUMNS = ["agent", "instance", "trial", "budget", "return", "steps", "tree_nodes", "wall_ms"]
AGGREGATE_COLUMNS = ["agent", "budget", "mean_return", "sem", "mean_nodes", "n"]
ERROR_COLUMNS = ["agent", "instance", "trial", "budget", "error"]
HISTOGRAM_COLUMNS = ["bin_low", "bin_high", "count", "frequency"]


def _num(x: float) -> str:
    return repr(float(x))


def _rows(items) -> tuple[list[str], Iterator[list]]:
    items = list(items)
    if items and isinstance(items[0], Aggregate):
        return AGGREGATE_COLUMNS, (
            [a.agent, a.budget, _num(a.mean_return), "" if a.sem is None else _num(a.sem), _num(a.mean_nodes), a.n]
            for a in items
        )
    return RECORD_COLUMNS, (
        [r.agent, r.instance, r.trial, r.budget, _num(r.ret), r.steps, _num(r.tree_nodes), _num(r.wall_ms)]
        for r in items
    )


def emit_csv(items, path: str | os.PathLike, kind: str | None = None) -> None:
    """Write records or aggregates; ``kind`` ("records"/"aggregates") picks the header of an empty file."""
    items = list(items)
    header, rows = _rows(items)
    if not items and kind == "aggregates":
        header = AGGREGATE_COLUMNS
    _write(path, header, rows)


def emit_errors(errors: Iterable[TrialRecord], path: str | os.PathLike) -> None:
    _write(path, ERROR_COLUMNS, ([e.agent, e.instance, e.trial, e.budget, e.error] for e in errors))


def emit_histogram(hist: Histogram, path: str | os.PathLike) -> None:
    freq = hist.frequencies
    _write(path, HISTOGRAM_COLUMNS, (
        [_num(lo), _num(hi), int(c), _num(f)] for lo, hi, c, f in zip(hist.edges[:-1], hist.edges[1:], hist.counts, freq)
    ))


def _write(path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def parse_records(path: str | os.PathLike) -> list[TrialRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, RECORD_COLUMNS, path)
        return [
            TrialRecord(agent=r["agent"], instance=int(r["instance"]), trial=int(r["trial"]), budget=int(r["budget"]),
                        ret=float(r["return"]), steps=int(r["steps"]), tree_nodes=float(r["tree_nodes"]),
                        wall_ms=float(r["wall_ms"]))
            for r in reader
        ]


def parse_aggregates(path: str | os.PathLike) -> list[Aggregate]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames, AGGREGATE_COLUMNS, path)
        return [
            Aggregate(r["agent"], int(r["budget"]), float(r["mean_return"]), float(r["sem"]) if r["sem"] else None,
                      float(r["mean_nodes"]), int(r["n"]))
            for r in reader
        ]


def _check_header(found, want, path) -> None:
    if list(found or []) != want:
        raise DomainError(f"{path}: expected columns {','.join(want)}, found {','.join(found or [])}")
