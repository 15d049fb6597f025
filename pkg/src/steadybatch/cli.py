"""Command line entry point.

Subcommands: generate (failure schedules), run (experiment), reference
(failure-free oracle), compare (diff two metrics files), walkthrough (run the
canonical two-failure scenario and assert every number in its trace).

Exit codes: 0 success, 1 usage or parse error, 2 invariant violation or
failed comparison, 3 all replicas dead.
"""

from __future__ import annotations

import argparse
import sys

import yaml

from .policy import InvariantViolation
from .sim import (
    ExperimentConfig,
    FailureSchedule,
    GenerationSpec,
    InjectionPoint,
    InvalidSpec,
    ScheduleEntry,
    generate_schedule,
    load_schedule,
    read_metrics,
    run_experiment,
    run_reference,
    save_schedule,
    write_metrics,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVARIANT = 2
EXIT_ALL_DEAD = 3


def _err(msg: str) -> None:
    print("error: %s" % msg, file=sys.stderr)


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            doc = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise InvalidSpec("config file %s does not parse: %s" % (path, exc))
    return ExperimentConfig.from_dict(doc)


# ---- generate ----

def _parse_range(text: str):
    try:
        lo, hi = text.split(":", 1)
        return int(lo), int(hi)
    except ValueError:
        raise InvalidSpec("expected RANGE as lo:hi, got %r" % text)


def _parse_weights(text: str):
    try:
        parts = [float(x) for x in text.split(":")]
    except ValueError:
        parts = []
    if len(parts) != 3:
        raise InvalidSpec("expected WEIGHTS as before:during:after, got %r" % text)
    return tuple(parts)


def cmd_generate(args) -> int:
    lo, hi = _parse_range(args.steps)
    spec = GenerationSpec(
        w_init=args.w_init,
        ranks_per_replica=args.ranks_per_replica,
        k_buckets=args.k_buckets,
        seed=args.seed,
        count=args.count,
        step_lo=lo,
        step_hi=hi,
        weights=_parse_weights(args.weights),
    )
    schedule = generate_schedule(spec)
    save_schedule(schedule, args.out)
    print("wrote %d entries to %s" % (len(schedule.entries), args.out))
    return EXIT_OK


# ---- run / reference ----

def _finish_run(config: ExperimentConfig, result, out_path: str) -> int:
    write_metrics(out_path, config, result)
    print("wrote %d metrics rows to %s" % (len(result.rows), out_path))
    if result.aborted:
        _err("aborted early: %s (partial metrics kept)" % result.abort_reason)
        return EXIT_ALL_DEAD
    return EXIT_OK


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.policy:
        config.policy = args.policy
    if args.out:
        config.out_path = args.out
    schedule = load_schedule(args.schedule) if args.schedule else None
    result = run_experiment(config, schedule)
    return _finish_run(config, result, config.out_path)


def cmd_reference(args) -> int:
    config = load_config(args.config)
    if args.out:
        config.out_path = args.out
    result = run_reference(config)
    return _finish_run(config, result, config.out_path)


# ---- compare ----

def cmd_compare(args) -> int:
    meta_run, rows_run = read_metrics(args.run)
    meta_ref, rows_ref = read_metrics(args.ref)
    if meta_run["config_hash"] != meta_ref["config_hash"]:
        _err("ConfigMismatch: run hash %s, reference hash %s"
             % (meta_run["config_hash"], meta_ref["config_hash"]))
        return EXIT_USAGE

    batch = meta_run["w_init"] * meta_run["g_init"]
    n = min(len(rows_run), len(rows_ref))
    max_delta = 0.0
    for i in range(n):
        delta = abs(rows_run[i]["loss"] - rows_ref[i]["loss"])
        max_delta = max(max_delta, delta)
        print("iter %4d  loss %.10g  ref %.10g  delta %.3e"
              % (i, rows_run[i]["loss"], rows_ref[i]["loss"], delta))
    violations = sum(1 for row in rows_run if row["contrib_total"] != batch)

    print("config_hash: %s" % meta_run["config_hash"])
    print("iterations compared: %d" % n)
    print("max |loss delta|: %.10g" % max_delta)
    print("invariant violations: %d" % violations)
    ok = violations == 0 and max_delta <= args.tol_loss
    print("verdict: %s" % ("PASS" if ok else "FAIL"))
    return EXIT_OK if ok else EXIT_INVARIANT


# ---- walkthrough ----

def _walkthrough_checks(rows):
    """The canonical trace: a 32-replica, 8-microbatch setup loses a major
    mid-reduction (boundary, 248 + 8), advances to a 28/1/1/1 layout with 9
    rounds, then loses its minor, which promotes the minor spare without
    changing anyone's quota."""
    r1, r2 = rows[1], rows[2]
    ev1, ev2 = r1["events"][0], r2["events"][0]
    roles1 = [role for _, role in r1["roles"]]
    roles2 = [role for _, role in r2["roles"]]
    contrib2 = dict(tuple(p) for p in r2["contributions"])
    return [
        ("iteration 1 crosses a boundary", r1["boundary"], True),
        ("survivor contributions at the failure", ev1["contrib"], 248),
        ("extension rounds granted", ev1["g_ext"], 1),
        ("boundary minors designated", ev1["n_bdry"], 23),
        ("regular contributions", r1["contrib_regular"], 248),
        ("extension contributions", r1["contrib_boundary"], 8),
        ("constant batch", r1["contrib_total"], 256),
        ("next-iteration rounds", r1["g_cur"], 9),
        ("next-iteration majors", roles1.count("major"), 28),
        ("next-iteration minors", roles1.count("minor"), 1),
        ("next-iteration major spares", roles1.count("major_spare"), 1),
        ("next-iteration minor spares", roles1.count("minor_spare"), 1),
        ("minor death stays off-boundary", r2["boundary"], False),
        ("minor spare promoted", ev2["promoted"], [[31, "minor"]]),
        ("promoted minor inherits the remainder quota", contrib2.get(31), 4),
        ("constant batch after promotion", r2["contrib_total"], 256),
        ("no extension after promotion", r2["contrib_boundary"], 0),
        ("majors after promotion", roles2.count("major"), 28),
        ("minors after promotion", roles2.count("minor"), 1),
        ("spares left after promotion", roles2.count("minor_spare"), 0),
    ]


def cmd_walkthrough(args) -> int:
    config = ExperimentConfig(
        w_init=32, g_init=8, iterations=4, k_buckets=4, dim=4,
        model_kind="constant", stream_seed=7, policy="static")
    spec = GenerationSpec(w_init=32, ranks_per_replica=8, k_buckets=4,
                          seed=0, count=2, step_lo=1, step_hi=3)
    schedule = FailureSchedule(spec, [
        ScheduleEntry(1, 5, 0, InjectionPoint("during_sync", 1)),
        ScheduleEntry(2, 29, 3, InjectionPoint("during_sync", 0)),
    ])
    result = run_experiment(config, schedule)
    if result.aborted or len(result.rows) < 3:
        _err("walkthrough aborted: %s" % result.abort_reason)
        return EXIT_INVARIANT

    failures = 0
    for label, actual, expected in _walkthrough_checks(result.rows):
        if actual == expected:
            print("ok   %s: %r" % (label, actual))
        else:
            print("FAIL %s: got %r, want %r" % (label, actual, expected))
            failures += 1
    if failures:
        _err("%d walkthrough checks failed" % failures)
        return EXIT_INVARIANT
    print("walkthrough: all %d checks passed" % len(_walkthrough_checks(result.rows)))
    return EXIT_OK


# ---- parser ----

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="steadybatch",
        description="fault-injection simulator for constant-batch data-parallel training")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a deterministic failure schedule")
    g.add_argument("--out", required=True)
    g.add_argument("--w-init", type=int, required=True)
    g.add_argument("--ranks-per-replica", type=int, default=8)
    g.add_argument("--k-buckets", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--steps", default="0:1", metavar="LO:HI",
                   help="half-open iteration window to place failures in")
    g.add_argument("--weights", default="0:1:0", metavar="B:D:A",
                   help="location weights before:during:after")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run an experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--schedule", default=None)
    r.add_argument("--policy", choices=["static", "adaptive"], default=None)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_run)

    o = sub.add_parser("reference", help="run the failure-free oracle")
    o.add_argument("--config", required=True)
    o.add_argument("--out", default=None)
    o.set_defaults(func=cmd_reference)

    c = sub.add_parser("compare", help="diff a run against its reference")
    c.add_argument("--run", required=True)
    c.add_argument("--ref", required=True)
    # losses are float sums folded over whatever membership survived, so a
    # recovered run agrees with its reference to roundoff, not bitwise; the
    # default tolerance accepts that and nothing more
    c.add_argument("--tol-loss", type=float, default=1e-9,
                   help="largest tolerated |loss delta| per iteration")
    c.set_defaults(func=cmd_compare)

    w = sub.add_parser("walkthrough",
                       help="run the canonical two-failure trace and check it")
    w.set_defaults(func=cmd_walkthrough)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if exc.code is not None else 0
        return EXIT_OK if code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except InvalidSpec as exc:
        _err(str(exc))
        return EXIT_USAGE
    except InvariantViolation as exc:
        _err("invariant violation: %s" % exc)
        return EXIT_INVARIANT
    except OSError as exc:
        _err(str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
