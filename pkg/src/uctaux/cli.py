"""Command line: ``uctaux {gen-maps,solve,run,aggregate,histogram}``.

Exit status is 0 on success, 1 on bad input or I/O failure, and for ``run``
the number of error rows (capped at 125) when any cell failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import harness, sailing
from .mdp import DomainError
from .solver import dump_csv

log = logging.getLogger("uctaux")


def _budgets(text: str) -> list[int]:
    return [int(t) for t in text.replace(",", " ").split()]


def cmd_gen_maps(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    start, goal = sailing.default_corners(args.width, args.height)
    for i in range(args.count):
        smap = sailing.generate_map(args.width, args.height, args.p, start, goal, harness.map_rng(args.seed, i))
        path = os.path.join(args.out, f"map_{i:03d}.txt")
        sailing.write_map(smap, path)
        log.info("%s: %d obstacles, %d rejections", path, int(smap.blocked.sum()), smap.rejections)
    print(f"wrote {args.count} maps to {args.out}")
    return 0


def cmd_solve(args) -> int:
    if args.domain == "sailing":
        prob = harness.sailing_problem(sailing.read_map(args.path), args.discount)
        sol = prob.solution
        print(f"{args.path}: {prob.mdp.n_states} states, {sol.iterations} sweeps, residual {sol.residual:.2e}")
        if args.out:
            dump_csv(sol, args.out)
    else:
        prob = harness.sheep_problem(harness.load_maze(args.path), args.discount)
        for t in prob.subtasks[:2]:
            sol = t.solution
            print(f"{t.kind} subtask: {t.mdp.n_states} states, {sol.iterations} sweeps, residual {sol.residual:.2e}")
            if args.out:
                root, ext = os.path.splitext(args.out)
                dump_csv(sol, f"{root}_{t.kind}{ext or '.csv'}")
    return 0


OVERRIDES = {
    "domain": str, "agents": None, "budgets": None, "instances": int, "trials": int, "seed": int, "width": int,
    "height": int, "obstacle_p": float, "maze": str, "exploration": float, "horizon": int, "max_steps": int,
    "discount": float, "recommend": str,
}


def cmd_run(args) -> int:
    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    for name in OVERRIDES:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    for role in harness.ROLES:
        value = getattr(args, f"h_{role}")
        if value:
            data.setdefault("heuristics", {})[role] = value
    spec = harness.ExperimentSpec.from_dict(data)
    total = len(spec.agents) * spec.instances * spec.trials * len(spec.budgets)
    done = [0]

    def progress(*_):
        done[0] += 1
        if args.verbose:
            log.info("cell %d/%d", done[0], total)

    records, errors = harness.run_experiment(spec, progress)
    harness.emit_csv(records, args.out)
    if args.aggregate:
        harness.emit_csv(harness.aggregate(records), args.aggregate, kind="aggregates")
    if errors:
        err_path = args.errors or os.path.splitext(args.out)[0] + "_errors.csv"
        harness.emit_errors(errors, err_path)
        print(f"{len(records)} records, {len(errors)} error rows in {err_path}", file=sys.stderr)
        return min(len(errors), 125)
    print(f"{len(records)} records written to {args.out}")
    return 0


def cmd_aggregate(args) -> int:
    aggs = harness.aggregate(harness.parse_records(args.records))
    if args.out:
        harness.emit_csv(aggs, args.out, kind="aggregates")
    else:
        for a in aggs:
            sem = "n/a" if a.sem is None else f"{a.sem:.3f}"
            print(f"{a.agent:32s} {a.budget:7d} {a.mean_return:10.3f} ± {sem:>7s}  nodes {a.mean_nodes:10.1f}  n={a.n}")
    return 0


def cmd_histogram(args) -> int:
    recs = harness.parse_records(args.records)
    pick = lambda name: harness.records_by_agent(recs, name, args.budget)
    h, r, o = pick(args.heuristic), pick(args.random), pick(args.optimal)
    if not (h and r and o):
        raise DomainError("records for the heuristic, Random and Optimal agents are all required")
    hist = harness.histogram_heuristic(h, r, o, args.bins)
    if args.out:
        harness.emit_histogram(hist, args.out)
    for lo, hi, c, f in zip(hist.edges[:-1], hist.edges[1:], hist.counts, hist.frequencies):
        print(f"[{lo:.2f}, {hi:.2f})  {c:5d}  {f:.3f}")
    if hist.skipped:
        print(f"{hist.skipped} cells skipped (Optimal no better than Random)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uctaux", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-maps", help="generate a batch of sailing maps")
    g.add_argument("--width", type=int, default=20)
    g.add_argument("--height", type=int, default=20)
    g.add_argument("--p", type=float, default=0.4, help="obstacle probability per cell")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="maps")
    g.set_defaults(func=cmd_gen_maps)

    s = sub.add_parser("solve", help="value iteration for a sailing map or the sheep subtasks of a maze")
    s.add_argument("path", help="map file, maze file, or 'reference' for the built-in maze")
    s.add_argument("--domain", choices=("sailing", "sheep"), default="sailing")
    s.add_argument("--discount", type=float, default=0.99)
    s.add_argument("--out", help="write state,v_star,greedy_action CSV")
    s.set_defaults(func=cmd_solve)

    r = sub.add_parser("run", help="run an experiment from a JSON spec; flags override fields")
    r.add_argument("config", nargs="?")
    r.add_argument("--out", required=True, help="records CSV")
    r.add_argument("--aggregate", help="also write the aggregate CSV here")
    r.add_argument("--errors", help="error rows CSV (default: <out>_errors.csv)")
    r.add_argument("--domain", choices=("sailing", "sheep"))
    r.add_argument("--agents", nargs="+")
    r.add_argument("--budgets", type=_budgets)
    r.add_argument("--instances", type=int)
    r.add_argument("--trials", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--width", type=int)
    r.add_argument("--height", type=int)
    r.add_argument("--obstacle-p", dest="obstacle_p", type=float)
    r.add_argument("--maze")
    r.add_argument("--exploration", type=float)
    r.add_argument("--horizon", type=int)
    r.add_argument("--max-steps", dest="max_steps", type=int)
    r.add_argument("--discount", type=float)
    r.add_argument("--recommend", choices=("q", "n"))
    for role in harness.ROLES:
        r.add_argument(f"--{role}", dest=f"h_{role}", metavar="HEURISTIC", help=f"default {role} heuristic")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("aggregate", help="mean return, SEM and mean tree nodes per (agent, budget)")
    a.add_argument("records")
    a.add_argument("--out")
    a.set_defaults(func=cmd_aggregate)

    h = sub.add_parser("histogram", help="normalized heuristic quality between Random and Optimal")
    h.add_argument("records")
    h.add_argument("--heuristic", required=True, help="agent label of the heuristic")
    h.add_argument("--random", default="Random")
    h.add_argument("--optimal", default="Optimal")
    h.add_argument("--budget", type=int, help="use records of this budget (default: all)")
    h.add_argument("--bins", type=int, default=10)
    h.add_argument("--out")
    h.set_defaults(func=cmd_histogram)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DomainError, ValueError, KeyError, OSError, sailing.MapGenerationError) as exc:
        print(f"uctaux: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
