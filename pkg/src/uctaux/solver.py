"""Value iteration over :class:`~uctaux.mdp.TabularMdp` and the policies derived from it."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .mdp import GreedyPolicy, MixturePolicy, TabularMdp


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SolveResult:
    v: np.ndarray
    q: np.ndarray  # -inf on invalid pairs
    iterations: int
    residual: float
    residuals: list[float] = field(default_factory=list, repr=False)

    @property
    def greedy_actions(self) -> np.ndarray:
        return greedy_table(self.q)

    @property
    def greedy_policy(self) -> GreedyPolicy:
        return extract_greedy(self)


def default_max_iterations(mdp: TabularMdp, tolerance: float) -> int:
    """Ten times the sweep count after which the gamma-contraction bound drops below ``tolerance``."""
    gamma = mdp.discount
    r_max = float(np.max(np.abs(mdp.rewards))) if mdp.rewards.size else 0.0
    if gamma == 0.0 or r_max == 0.0:
        return 10
    bound = math.log(tolerance * (1.0 - gamma) / r_max) / math.log(gamma)
    return max(10, math.ceil(10 * bound))


def _backup(mdp: TabularMdp, v: np.ndarray) -> np.ndarray:
    q = mdp.expected_reward + mdp.discount * (mdp.matrix @ v).reshape(mdp.n_states, mdp.n_actions)
    return np.where(mdp.action_mask, q, -np.inf)


def value_iteration(mdp: TabularMdp, tolerance: float = 1e-6, max_iterations: int | None = None) -> SolveResult:
    """Synchronous Bellman sweeps from V = 0 until the max change is at most ``tolerance``.

    States without valid actions (terminal ones included) keep value 0.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    if max_iterations is None:
        max_iterations = default_max_iterations(mdp, tolerance)
    live = mdp.action_mask.any(axis=1)
    v = np.zeros(mdp.n_states)
    residuals = []
    for it in range(1, max_iterations + 1):
        v_new = np.where(live, _backup(mdp, v).max(axis=1, initial=-np.inf), 0.0)
        residual = float(np.max(np.abs(v_new - v))) if v.size else 0.0
        residuals.append(residual)
        v = v_new
        if residual <= tolerance:
            break
    else:
        raise ConvergenceError(f"no convergence after {max_iterations} sweeps (residual {residual:.3g})")
    return SolveResult(v=v, q=_backup(mdp, v), iterations=it, residual=residual, residuals=residuals)


def evaluate_policy(
    mdp: TabularMdp, probs: np.ndarray, tolerance: float = 1e-6, max_iterations: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Iterative evaluation of a stochastic policy given as an (S, A) probability matrix.

    Returns ``(V_pi, Q_pi)``; ``Q_pi`` is -inf on invalid pairs.
    """
    if max_iterations is None:
        max_iterations = default_max_iterations(mdp, tolerance)
    v = np.zeros(mdp.n_states)
    for _ in range(max_iterations):
        q = _backup(mdp, v)
        v_new = np.einsum("sa,sa->s", probs, np.where(mdp.action_mask, q, 0.0))
        residual = float(np.max(np.abs(v_new - v))) if v.size else 0.0
        v = v_new
        if residual <= tolerance:
            return v, _backup(mdp, v)
    raise ConvergenceError(f"policy evaluation did not converge in {max_iterations} sweeps")


def greedy_table(q: np.ndarray) -> np.ndarray:
    """Lowest-index argmax per state; -1 where no action is valid."""
    best = np.argmax(q, axis=1)
    return np.where(np.isfinite(q).any(axis=1), best, -1).astype(np.int64)


def extract_greedy(result: SolveResult) -> GreedyPolicy:
    return GreedyPolicy.from_table(greedy_table(result.q), name="optimal")


def stochastic_optimal(result: SolveResult, p: float) -> MixturePolicy:
    """Optimal action with probability ``p``, uniform valid action otherwise."""
    return MixturePolicy(extract_greedy(result), p)


def mixture_matrix(mdp: TabularMdp, greedy: np.ndarray, p: float) -> np.ndarray:
    """(S, A) probabilities of :class:`MixturePolicy` over a tabular model."""
    counts = mdp.action_mask.sum(axis=1, keepdims=True)
    probs = np.where(mdp.action_mask, (1.0 - p) / np.maximum(counts, 1), 0.0)
    rows = np.flatnonzero(greedy >= 0)
    probs[rows, greedy[rows]] += p
    return probs


# -- caching -----------------------------------------------------------------


def dump_csv(result: SolveResult, path: str | os.PathLike) -> None:
    """Write ``state,v_star,greedy_action`` rows, one per state index."""
    greedy = result.greedy_actions
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["state", "v_star", "greedy_action"])
            for s, (v, a) in enumerate(zip(result.v, greedy)):
                w.writerow([s, repr(float(v)), int(a)])
    except OSError as exc:
        raise OSError(f"cannot write solution to {path}: {exc}") from exc


def load_csv(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    v = np.array([float(r["v_star"]) for r in rows])
    greedy = np.array([int(r["greedy_action"]) for r in rows], dtype=np.int64)
    return v, greedy


def save_npz(result: SolveResult, path: str | os.PathLike) -> None:
    np.savez_compressed(path, v=result.v, q=result.q, iterations=result.iterations, residual=result.residual)


def load_npz(path: str | os.PathLike) -> SolveResult:
    with np.load(path) as z:
        return SolveResult(v=z["v"], q=z["q"], iterations=int(z["iterations"]), residual=float(z["residual"]))
