"""Command-line entry point: ``python -m shardchain <subcommand>`` or ``shardchain <subcommand>``.

Every subcommand accepts ``--config FILE`` (JSON) whose keys mirror the
long flags (dashes become underscores); explicit flags win over the file
and ``--seed`` overrides any seed in it.  Results land in ``--out`` or in
``$SHARDCHAIN_OUT`` (default ``./results``) as CSV/JSON that embed the
master seed.  Exit status: 0 success, 1 configuration error, 2 oracle
violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

log = logging.getLogger("shardchain")

EXIT_OK, EXIT_CONFIG, EXIT_ORACLE = 0, 1, 2
OUT_ENV = "SHARDCHAIN_OUT"


class ConfigFault(Exception):
    pass


def _config_errors() -> tuple:
    from .bench.serializability import MalformedTrace
    from .bench.workload import SpecError
    from .shardform import InvalidParams
    from .simnet.adversary import SpecError as AdvSpecError
    from .simnet.engine import ConfigError

    return (ConfigFault, ConfigError, SpecError, AdvSpecError, InvalidParams, MalformedTrace, ValueError, KeyError,
            TypeError, json.JSONDecodeError, OSError)


def _out_dir(args) -> str:
    d = args.out or os.environ.get(OUT_ENV) or "results"
    os.makedirs(d, exist_ok=True)
    return d


def _write_json(args, name: str, obj) -> str:
    path = os.path.join(_out_dir(args), name)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
    return path


def _write_csv(args, name: str, rows: Sequence[dict], columns: Optional[Sequence[str]] = None) -> str:
    path = os.path.join(_out_dir(args), name)
    cols = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def _parallel(fn, items, jobs: int) -> list:
    """Run independent simulations; results come back in input order."""
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _seeds(args) -> list[int]:
    return [args.seed + i for i in range(args.runs)]


# -- subcommands --------------------------------------------------------------


def cmd_sizing(args) -> int:
    from .shardform import sizing_table

    fractions = [float(x) for x in (args.adversary if isinstance(args.adversary, list) else [args.adversary])]
    res = args.resilience if isinstance(args.resilience, list) else [args.resilience]
    if args.total < 1 or any(not 0 <= s < 1 for s in fractions):
        raise ConfigFault("total >= 1 and adversary fraction in [0, 1) required")
    rows = sizing_table(int(args.total), fractions, res, float(args.target))
    _write_csv(args, "sizing.csv", rows, ["N", "s", "resilience", "target", "n", "f", "probability"])
    for r in rows:
        print("N=%d s=%.4f %-5s n=%s f=%s p=%s" % (r["N"], r["s"], r["resilience"], r["n"], r["f"],
                                                  "-" if r["probability"] is None else "%.3e" % r["probability"]))
    return EXIT_OK


def cmd_beacon_sim(args) -> int:
    from .enclave import Enclave
    from .shardform import beacon_repeat_monte_carlo, repeat_probability, run_beacon_round

    N = int(args.nodes)
    l = args.l if args.l is not None else max(0, round(math.log2(N) - math.log2(max(math.log2(N), 1)))) if N > 1 else 0
    l = int(l)
    analytic = repeat_probability(l, N)
    mc = beacon_repeat_monte_carlo(l, N, int(args.rounds), args.seed)
    sigma = math.sqrt(analytic * (1 - analytic) / args.rounds)
    enclaves = [Enclave(i, b"beacon-cli|%d|%d" % (args.seed, i)) for i in range(N)]
    outcome = run_beacon_round(enclaves, delta=float(args.delta), l=l)
    report = {"seed": args.seed, "N": N, "l": l, "rounds": args.rounds, "analytic_repeat": analytic,
              "monte_carlo_repeat": mc, "sigma": sigma, "agreed": outcome.agreed, "repeats": outcome.repeats}
    _write_json(args, "beacon.json", report)
    print(json.dumps(report, sort_keys=True))
    if not outcome.agreed:
        print("oracle violation: beacon-agreement", file=sys.stderr)
        return EXIT_ORACLE
    return EXIT_OK


def cmd_consensus_bench(args) -> int:
    from .bench.runner import consensus_bench
    from .consensus import Variant
    from .simnet.scenarios import ATTACKS, run_consensus_trace

    variant = Variant(args.variant)
    if args.full_queues:
        r = consensus_bench(variant, n=int(args.n), seed=args.seed, duration=float(args.duration))
        report = dict(r.__dict__, seed=args.seed)
        _write_json(args, "consensus_full_queues.json", report)
        print(json.dumps(report, sort_keys=True))
        return EXIT_OK
    if args.attack not in ATTACKS + ("none", "crash_leader"):
        raise ConfigFault(f"unknown attack {args.attack!r}")
    outs = _parallel(lambda s: run_consensus_trace(variant, s, args.attack, f=args.f, requests=int(args.requests),
                                                   trace_keep=()), _seeds(args), args.jobs)
    rows = [{"seed": o.seed, "variant": o.variant, "attack": o.attack, "n": o.n, "f": o.f, "safe": o.safe,
             "executed_all": o.executed_all, "issued": o.issued, "completed": o.completed,
             "view_changes": o.view_changes, "trace_digest": o.trace_digest} for o in outs]
    _write_csv(args, "consensus.csv", rows)
    bad = [o.seed for o in outs if not o.safe]
    print("%s %s: %d runs, %d unsafe, %d executed all" % (variant.value, args.attack, len(outs), len(bad),
                                                          sum(o.executed_all for o in outs)))
    if bad:
        print("oracle violation: consensus-safety (seeds %s)" % bad[:10], file=sys.stderr)
        return EXIT_ORACLE
    return EXIT_OK


def cmd_shard_bench(args) -> int:
    from .bench.runner import REPORT_COLUMNS, ShardConfig, run_benchmark
    from .bench.workload import Benchmark, WorkloadSpec
    from .consensus import Variant
    from .simnet.network import Uniform
    from .simnet.scenarios import SimConfig

    spec = WorkloadSpec(Benchmark(args.benchmark), clients=int(args.clients), mode=args.mode, theta=float(args.theta),
                        key_space=int(args.key_space), duration=float(args.duration), rate=float(args.rate))
    shards = ShardConfig(num_shards=int(args.shards), with_ref=not args.no_ref, variant=Variant(args.variant))
    if shards.num_shards < 1:
        raise ConfigFault("shards >= 1 required")

    def one(seed):
        keep = None if args.trace and seed == args.seed else ("xtx", "view_change", "redrive")
        return run_benchmark(SimConfig(seed=seed, delay=Uniform(0.001, 0.005), duration=spec.duration), spec, shards,
                             trace_keep=keep)

    results = _parallel(one, _seeds(args), args.jobs)
    reports = [r for r, _ in results]
    _write_csv(args, "shard_bench.csv", [r.csv_row() for r in reports], REPORT_COLUMNS)
    _write_json(args, "shard_bench.json", [r.to_json() for r in reports])
    if args.trace:
        results[0][1].write(os.path.join(_out_dir(args), "trace.jsonl"))
    for r in reports:
        print("seed=%d shards=%d tput=%.1f abort=%.4f green=%s %s" % (r.seed, r.shards, r.throughput, r.abort_rate,
                                                                     r.green, r.oracles))
    failed = [(r.seed, k) for r in reports for k, v in r.oracles.items() if not v]
    failed += [(r.seed, "accounting") for r in reports if not r.accounting_ok]
    if failed:
        print("oracle violation: %s" % ", ".join("%s@seed%d" % (k, s) for s, k in failed), file=sys.stderr)
        return EXIT_ORACLE
    return EXIT_OK


def cmd_reconfig_sim(args) -> int:
    from .simnet.scenarios import epoch_transition_scenario

    if args.mode not in ("batched", "naive"):
        raise ConfigFault("mode must be batched or naive")
    out = epoch_transition_scenario(args.seed, n=int(args.n), B=args.batch, mode=args.mode)
    report = dict(out.to_json(), seed=args.seed)
    _write_json(args, "reconfig.json", report)
    print("mode=%s B=%d baseline_median=%.1f transition_min=%.1f zero_windows=%d" % (
        out.mode, out.B, out.baseline_median, out.transition_min, out.zero_windows))
    return EXIT_OK


def cmd_poet_sim(args) -> int:
    from .poet import CSV_COLUMNS, PoetConfig, poet_plus_l, simulate_chain

    l = poet_plus_l(int(args.n)) if args.l == "plus" else float(args.l)
    cfg = PoetConfig(n=int(args.n), l=l, block_time=float(args.block_time), block_size=int(args.block_size))
    cfg.validate()
    runs = _parallel(lambda s: simulate_chain(cfg, int(args.rounds), s), _seeds(args), args.jobs)
    rows = [dict(r.csv_row()) for r in runs]
    _write_csv(args, "poet.csv", rows, CSV_COLUMNS)
    _write_json(args, "poet.json", {"seed": args.seed, "runs": [dict(r.csv_row(), seed=r.seed,
                                                                      converged=r.converged) for r in runs]})
    mean = sum(r.stale_rate for r in runs) / len(runs)
    print("n=%d l=%.3f mean stale rate %.4f over %d runs" % (cfg.n, cfg.l, mean, len(runs)))
    if not all(r.converged for r in runs):
        print("oracle violation: chain-consistency", file=sys.stderr)
        return EXIT_ORACLE
    return EXIT_OK


def cmd_xshard_prob(args) -> int:
    from .shardform import cross_shard_probability

    dist = cross_shard_probability(int(args.args), int(args.shards), exact=True)
    rows = [{"x": x, "probability": float(p), "exact": str(p)} for x, p in sorted(dist.items())]
    _write_csv(args, "xshard_prob.csv", rows, ["x", "probability", "exact"])
    for r in rows:
        print("x=%d p=%.6f (%s)" % (r["x"], r["probability"], r["exact"]))
    if sum(dist.values()) != 1:
        print("oracle violation: distribution-mass", file=sys.stderr)
        return EXIT_ORACLE
    return EXIT_OK


def cmd_verify_trace(args) -> int:
    from .bench.serializability import History, check_serializability
    from .simnet.engine import verify_trace_chain

    with open(args.file) as fh:
        text = fh.read()
    if args.history:
        verdict = check_serializability(History.from_json(json.loads(text)))
        if not verdict.serializable:
            print("oracle violation: conflict-serializability (cycle %s)" % verdict.cycle, file=sys.stderr)
            return EXIT_ORACLE
        print("serializable; witness order %s" % verdict.order)
        return EXIT_OK
    records = [json.loads(line) for line in text.splitlines() if line.strip()]
    ok, bad = verify_trace_chain(records)
    if not ok:
        print("oracle violation: trace-hash-chain broken at record %d" % bad, file=sys.stderr)
        return EXIT_ORACLE
    print("trace ok: %d records" % len(records))
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shardchain", description="Sharded TEE-assisted blockchain simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, runs=1):
        sp.add_argument("--config", help="JSON file with option values")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./results)")
        sp.add_argument("--runs", type=int, default=runs)
        sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("sizing", help="minimum committee size tables")
    common(sp)
    sp.add_argument("--total", type=int, default=1000)
    sp.add_argument("--adversary", type=float, nargs="+", default=[0.125, 0.25])
    sp.add_argument("--resilience", nargs="+", default=["half", "third"], choices=["half", "third"])
    sp.add_argument("--target", type=float, default=2.0 ** -20)
    sp.set_defaults(fn=cmd_sizing)

    sp = sub.add_parser("beacon-sim", help="beacon repeat probability and agreement")
    common(sp)
    sp.add_argument("--nodes", type=int, default=64)
    sp.add_argument("--l", type=int, default=None)
    sp.add_argument("--rounds", type=int, default=10000)
    sp.add_argument("--delta", type=float, default=1.0)
    sp.set_defaults(fn=cmd_beacon_sim)

    sp = sub.add_parser("consensus-bench", help="seeded consensus traces under an attack")
    common(sp, runs=10)
    sp.add_argument("--variant", default="AHLPlus", choices=["HL", "AHL", "AHLPlus", "AHLR"])
    sp.add_argument("--attack", default="none")
    sp.add_argument("--f", type=int, default=None)
    sp.add_argument("--requests", type=int, default=24)
    sp.add_argument("--full-queues", action="store_true", help="throughput under saturating load at --n")
    sp.add_argument("--n", type=int, default=65)
    sp.add_argument("--duration", type=float, default=2.0)
    sp.set_defaults(fn=cmd_consensus_bench)

    sp = sub.add_parser("shard-bench", help="sharded throughput with safety/atomicity/serializability oracles")
    common(sp)
    sp.add_argument("--shards", type=int, default=2)
    sp.add_argument("--benchmark", default="SmallBank", choices=["SmallBank", "KVStore"])
    sp.add_argument("--clients", type=int, default=4)
    sp.add_argument("--mode", default="closed", choices=["open", "closed"])
    sp.add_argument("--theta", type=float, default=0.0)
    sp.add_argument("--key-space", type=int, default=1000)
    sp.add_argument("--duration", type=float, default=5.0)
    sp.add_argument("--rate", type=float, default=500.0)
    sp.add_argument("--variant", default="AHLPlus", choices=["HL", "AHL", "AHLPlus", "AHLR"])
    sp.add_argument("--no-ref", action="store_true", help="single-shard transactions only, no reference committee")
    sp.add_argument("--trace", action="store_true", help="write the first run's trace as JSON lines")
    sp.set_defaults(fn=cmd_shard_bench)

    sp = sub.add_parser("reconfig-sim", help="committee transition, batched or swap-all")
    common(sp)
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--batch", type=int, default=None)
    sp.add_argument("--mode", default="batched")
    sp.set_defaults(fn=cmd_reconfig_sim)

    sp = sub.add_parser("poet-sim", help="PoET / PoET+ stale-block rate")
    common(sp, runs=5)
    sp.add_argument("--n", type=int, default=128)
    sp.add_argument("--l", default="0", help="filter bits, or 'plus' for log2(n)/2")
    sp.add_argument("--block-time", type=float, default=24.0)
    sp.add_argument("--block-size", type=int, default=2_000_000)
    sp.add_argument("--rounds", type=int, default=300)
    sp.set_defaults(fn=cmd_poet_sim)

    sp = sub.add_parser("xshard-prob", help="distribution of shards touched by a d-argument transaction")
    common(sp)
    sp.add_argument("--args", type=int, default=2)
    sp.add_argument("--shards", type=int, default=2)
    sp.set_defaults(fn=cmd_xshard_prob)

    sp = sub.add_parser("verify-trace", help="check a trace's hash chain, or a history's serializability")
    common(sp)
    sp.add_argument("file")
    sp.add_argument("--history", action="store_true", help="file is a JSON history, not a JSON-lines trace")
    sp.set_defaults(fn=cmd_verify_trace)
    return p


def _apply_config(parser: argparse.ArgumentParser, args) -> None:
    if not getattr(args, "config", None):
        if args.seed is None:
            args.seed = 0
        return
    with open(args.config) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ConfigFault("config must be a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    defaults = {a.dest: a.default for a in sub._actions}
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in defaults:
            raise ConfigFault(f"unknown config key {key!r}")
        if dest == "seed":
            if args.seed is None:
                args.seed = int(value)
        elif getattr(args, dest) == defaults[dest]:
            setattr(args, dest, value)
    if args.seed is None:
        args.seed = 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _apply_config(parser, args)
        if args.runs < 1 or args.jobs < 1:
            raise ConfigFault("--runs and --jobs must be >= 1")
        code = args.fn(args)
        _write_json(args, "run.json", {"command": args.command, "seed": args.seed, "exit": code,
                                       "argv": list(argv) if argv is not None else sys.argv[1:]})
        return code
    except _config_errors() as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
