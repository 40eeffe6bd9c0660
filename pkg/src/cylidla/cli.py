"""Command-line interface: ``cylidla <subcommand> [options]``.

Exit codes: 0 when every declared check passes (or there is nothing to
check), 1 when a check fails, 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import yaml

from .abelian import InstructionStacks
from .cluster import new_cluster, run_process
from .coupling import COALESCENCE_COLUMNS, coupled_idla_pair, match_residues
from .cluster import grow
from .experiments import EXPERIMENTS, ExperimentSpec, SpecError, abelian_trials, run
from .graphs import FAMILIES, GraphError, graph_for_size, load_edge_list, mixing_time
from .rng import make_rng
from .walk import WalkMode

USAGE_ERRORS = (SpecError, GraphError, ValueError, KeyError, FileNotFoundError, yaml.YAMLError)


class UsageError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--graph", choices=[f for f in FAMILIES if f != "custom"], help="base graph family")
    g.add_argument("--n", type=int, nargs="+", help="vertex count(s) of the base graph")
    g.add_argument("--graph-file", help="edge list (u v per line) instead of --graph/--n")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--replicas", type=int, default=None)
    g.add_argument("--mode", choices=["exact", "fastforward"], default=None)
    g.add_argument("--epsilon", type=float, default=None)
    g.add_argument("--out", help="output path (default: stdout)")
    g.add_argument("--format", choices=["csv", "json"], default="json")
    g.add_argument("--config", help="YAML file with ExperimentSpec fields")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="cylidla", description="Internal DLA on cylinder graphs G x Z.")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="run (shifted) IDLA and record cluster statistics")
    s.add_argument("--steps", type=int, required=True, help="number of particles T")
    s.add_argument("--record-every", type=int, default=0, help="record every k steps (default: start and end)")
    s.add_argument("--shifted", action="store_true")
    s.add_argument("--snapshot", help="write the final cluster as JSON here")

    m = sub.add_parser("mix", parents=[common], help="mixing-time profile of the lazy base walk")
    m.add_argument("--method", choices=["exact", "monte_carlo"], default="exact")
    m.add_argument("--samples", type=int, default=4000)

    c = sub.add_parser("couple", parents=[common], help="coalescence times of coupled shifted IDLA pairs")
    c.add_argument("--coupling", choices=["shared_stacks", "pairwise_maximal"], default="shared_stacks")
    c.add_argument("--budget", type=int, required=True)
    c.add_argument("--burn-in", type=int, default=0, help="shifted steps used to make each starting state")

    a = sub.add_parser("abelian-check", parents=[common], help="order independence of stabilization")
    a.add_argument("--particles", type=int, default=20)
    a.add_argument("--orders", type=int, default=50)

    e = sub.add_parser("experiment", parents=[common], help="run a named experiment")
    e.add_argument("id", choices=EXPERIMENTS)
    e.add_argument("--gamma", type=float)
    e.add_argument("--steps", type=int)
    e.add_argument("--budget", type=int)
    e.add_argument("--workers", type=int)
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="experiment parameter override (YAML value)")

    st = sub.add_parser("stationary", parents=[common], help="empirical stationary heights of shifted IDLA")
    st.add_argument("--samples", type=int, default=500)
    st.add_argument("--burn-in", type=int)
    st.add_argument("--thin", type=int)
    return parser


def _graph(args, n=None):
    if args.graph_file:
        return load_edge_list(args.graph_file)
    if not args.graph or not (n or args.n):
        raise UsageError("give --graph and --n, or --graph-file")
    return graph_for_size(args.graph, n or args.n[0])


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _table(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _walk_mode(args, G):
    if (args.mode or "fastforward") == "exact":
        return WalkMode.exact()
    return WalkMode.fastforward(G, args.epsilon or 1e-3)


def cmd_simulate(args) -> int:
    G = _graph(args)
    T = args.steps
    if T < 0:
        raise UsageError("--steps must be >= 0")
    every = args.record_every
    schedule = range(0, T + 1, every) if every > 0 else None
    tr = run_process("flat", G, T, make_rng(args.seed or 0), _walk_mode(args, G), schedule, shifted=args.shifted)
    if args.snapshot:
        Path(args.snapshot).write_text(tr.final.to_json())
    if args.format == "csv":
        rows = [(s.t, s.h, s.k, s.size_above, repr(s.excess), s.cumulative_shift) for s in tr.stats]
        _emit(_table(["t", "h", "k", "size_above", "excess", "cumulative_shift"], rows), args.out)
    else:
        doc = {"graph": G.name, "N": G.N, "steps": T, "shifted": args.shifted,
               "tv_debt": tr.tv_debt, "aborted_steps": tr.aborted_steps,
               "stats": [s.to_dict() for s in tr.stats], "final": tr.final.to_dict()}
        _emit(json.dumps(doc, sort_keys=True, indent=1) + "\n", args.out)
    return 0


def cmd_mix(args) -> int:
    G = _graph(args)
    eps = args.epsilon or 0.5
    prof = mixing_time(G, eps, args.method, samples=args.samples, seed=args.seed)
    if args.format == "csv":
        if args.out:
            prof.write_csv(args.out)
        else:
            rows = [(e, prof.tau[e]) for e in prof.epsilon_grid]
            _emit(_table(["epsilon", "tau"], rows), None)
    else:
        _emit(json.dumps(prof.to_dict(), sort_keys=True, indent=1) + "\n", args.out)
    return 0


def cmd_couple(args) -> int:
    G = _graph(args)
    eps = args.epsilon or 1e-3
    mode = WalkMode.fastforward(G, eps)
    seed = args.seed or 0
    records = []
    for i in range(args.replicas or 1):
        A, B = new_cluster(G), new_cluster(G)
        grow(A, args.burn_in, make_rng(seed, i, 0), mode, shifted=True)
        grow(B, args.burn_in, make_rng(seed, i, 1), mode, shifted=True)
        match_residues(A, B, make_rng(seed, i, 2), mode)
        records.append(coupled_idla_pair(A, B, G, args.coupling, seed=int(make_rng(seed, i, 3).integers(1 << 62)),
                                         budget=args.budget, epsilon=eps, family=args.graph or G.name))
    if args.format == "csv":
        _emit(_table(COALESCENCE_COLUMNS, [r.row() for r in records]), args.out)
    else:
        doc = [dict(zip(COALESCENCE_COLUMNS, r.row())) for r in records]
        _emit(json.dumps(doc, sort_keys=True, indent=1) + "\n", args.out)
    return 0


def cmd_abelian(args) -> int:
    G = _graph(args)
    res = abelian_trials(G, args.replicas or 10, args.particles, args.orders, args.seed or 0)
    ok = res["mismatches"] == 0
    doc = {"graph": G.name, "particles": args.particles, "orders": args.orders, "passed": ok, **res}
    if args.format == "csv":
        _emit(_table(["graph", "stacks", "particles", "orders", "mismatches", "passed"],
                     [(G.name, len(res["topples"]), args.particles, args.orders, res["mismatches"], int(ok))]),
              args.out)
    else:
        _emit(json.dumps(doc, sort_keys=True, indent=1) + "\n", args.out)
    return 0 if ok else 1


def _spec_from_args(args, id: str, extra_params: dict | None = None) -> ExperimentSpec:
    fields_ = {}
    if args.config:
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a mapping")
        if loaded.get("id", id) != id:
            raise UsageError(f"config is for experiment {loaded['id']!r}, not {id!r}")
        loaded.pop("id", None)
        fields_.update(loaded)
    if args.graph_file:
        raise UsageError("experiments take a graph family and sizes, not --graph-file")
    for key, attr in (("family", "graph"), ("sizes", "n"), ("seed", "seed"), ("replicas", "replicas"),
                      ("mode", "mode"), ("epsilon", "epsilon"), ("gamma", "gamma"), ("steps", "steps"),
                      ("budget", "budget"), ("workers", "workers")):
        v = getattr(args, attr, None)
        if v is not None:
            fields_[key] = v
    params = dict(fields_.pop("params", None) or {})
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        params[k] = yaml.safe_load(v)
    params.update(extra_params or {})
    return ExperimentSpec.default(id, params=params, **fields_)


def _emit_record(rec, args) -> int:
    text = rec.to_json(wall_clock=True) + "\n" if args.format == "json" else rec.checks_csv()
    _emit(text, args.out)
    for c in rec.checks:
        print(c.line(), file=sys.stderr)
    return 0 if rec.passed else 1


def cmd_experiment(args) -> int:
    return _emit_record(run(_spec_from_args(args, args.id)), args)


def cmd_stationary(args) -> int:
    extra = {"samples": args.samples}
    if args.burn_in is not None:
        extra["burn_in"] = args.burn_in
    if args.thin is not None:
        extra["thin"] = args.thin
    return _emit_record(run(_spec_from_args(args, "stationary_height", extra)), args)


COMMANDS = {
    "simulate": cmd_simulate, "mix": cmd_mix, "couple": cmd_couple, "abelian-check": cmd_abelian,
    "experiment": cmd_experiment, "stationary": cmd_stationary,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, *USAGE_ERRORS) as exc:
        print(f"cylidla: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
