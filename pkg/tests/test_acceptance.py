"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line (also collected
into the pytest terminal summary by conftest) before asserting.
"""

import json
import math
import time

import numpy as np
import pytest

from shardchain.bench.runner import (abort_sweep, isolation_check, run_benchmark, run_xshard_case, scaling_sweep,
                                     ShardConfig)
from shardchain.bench.serializability import check_serializability, split_payment_history
from shardchain.bench.workload import WorkloadSpec
from shardchain.consensus import Variant
from shardchain.poet import PoetConfig, compare_poet, simulate_chain
from shardchain.shardform import (SizingQuery, beacon_repeat_monte_carlo, cross_shard_monte_carlo,
                                  cross_shard_probability, faulty_committee_probability, min_committee_size,
                                  repeat_probability, transition_failure_probability)
from shardchain.simnet.explore import explore_small_committee
from shardchain.simnet.network import Uniform
from shardchain.simnet.scenarios import (ATTACKS, SimConfig, epoch_transition_scenario, run_consensus_trace,
                                         run_rollback_trace)

RESULTS: list = []

pytestmark = pytest.mark.acceptance


def verdict(num: int, ok: bool, detail: str) -> None:
    line = "ACCEPTANCE %2d %s  %s" % (num, "PASS" if ok else "FAIL", detail)
    RESULTS.append(line)
    print(line)
    assert ok, line


def popcount(a):
    return np.bitwise_count(a).astype(np.int64)


def exhaustive_tails(N: int) -> dict:
    """P[at least f of the first F nodes land in a uniform n-subset of N], by counting all 2^N subsets."""
    masks = np.arange(1 << N, dtype=np.uint32)
    size = popcount(masks)
    out = {}
    for F in range(N + 1):
        bad = popcount(masks & np.uint32((1 << F) - 1))
        table = np.zeros((N + 1, N + 2), dtype=np.int64)
        np.add.at(table, (size, bad), 1)
        for n in range(1, N + 1):
            row = table[n]
            total = row.sum()
            tail = np.cumsum(row[::-1])[::-1]  # tail[f] = #subsets with >= f bad
            for f in range(n + 1):
                out[(F, n, f)] = tail[f] / total
    return out


def test_c01_tail_matches_exhaustive_enumeration():
    t0 = time.perf_counter()
    worst = 0.0
    for N in range(1, 17):
        for (F, n, f), p in exhaustive_tails(N).items():
            worst = max(worst, abs(faulty_committee_probability(N, F, n, f) - p))
    elapsed = time.perf_counter() - t0
    verdict(1, worst < 1e-12 and elapsed < 10, "max |err| %.2e over N<=16, %.1fs" % (worst, elapsed))


def test_c02_committee_sizing():
    t0 = time.perf_counter()
    half = min_committee_size(SizingQuery(1000, 0.25)).n
    eighth = min_committee_size(SizingQuery(1000, 0.125)).n
    third = min_committee_size(SizingQuery(1000, 0.25, "third")).n
    elapsed = time.perf_counter() - t0
    ok = 76 <= half <= 82 and 25 <= eighth <= 30 and third >= 600 and elapsed < 60
    verdict(2, ok, "N=1000: s=.25 half n=%d (want 76-82), s=.125 n=%d (want 25-30), s=.25 third n=%d "
                   "(want >=600), %.1fs" % (half, eighth, third, elapsed))


def test_c03_transition_bound():
    n = 80
    f = (n - 1) // 2
    N = 1000
    tail = faulty_committee_probability(N, N // 4, n, f + 1)
    bound = transition_failure_probability(N, N // 4, n, f + 1, 10, 6)
    at_target = 12 * 2.0 ** -20  # the same bound when each committee sits exactly at the target tail
    ok = tail <= 2.0 ** -20 and 3e-6 <= bound <= 3e-5 and 3e-6 <= at_target <= 3e-5
    verdict(3, ok, "per-committee tail %.2e, bound %.2e (at 2^-20: %.2e)" % (tail, bound, at_target))


def test_c04_beacon_repeat_probability():
    t0 = time.perf_counter()
    rounds = 100_000
    parts = []
    ok = True
    for l, N in ((1, 2), (3, 16), (6, 64)):
        p = repeat_probability(l, N)
        mc = beacon_repeat_monte_carlo(l, N, rounds, seed=l * 1000 + N)
        sigma = math.sqrt(p * (1 - p) / rounds)
        ok &= abs(mc - p) <= 3 * sigma
        parts.append("(l=%d,N=%d) %.4f vs MC %.4f" % (l, N, p, mc))
    l512 = math.log2(512) - math.log2(math.log2(512))
    p512 = repeat_probability(l512, 512)
    ok &= p512 < 2.0 ** -11
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 120
    verdict(4, ok, "; ".join(parts) + "; N=512 %.2e < 2^-11; %.0fs" % (p512, elapsed))


def test_c05_consensus_safety():
    t0 = time.perf_counter()
    bad = []
    runs = 0
    for variant in Variant:
        for attack in ATTACKS:
            for seed in range(200):
                o = run_consensus_trace(variant, seed, attack)
                runs += 1
                if not o.safe or o.n > 9:
                    bad.append((variant.value, attack, seed))
    ex = explore_small_committee(Variant.AHL, f=1, timer_budget=1)
    elapsed = time.perf_counter() - t0
    ok = not bad and ex.safe and ex.complete and elapsed < 600
    verdict(5, ok, "%d traces, %d unsafe; explorer %d states complete=%s violations=%d; %.0fs"
            % (runs, len(bad), ex.states, ex.complete, len(ex.violations), elapsed))


def test_c06_liveness_after_leader_crash():
    t0 = time.perf_counter()
    failed = []
    for variant in Variant:
        for seed in range(100):
            o = run_consensus_trace(variant, seed, "crash_leader")
            if not (o.executed_all and o.safe and o.view_changes >= 1):
                failed.append((variant.value, seed))
    elapsed = time.perf_counter() - t0
    verdict(6, not failed and elapsed < 300, "4 variants x 100 traces, %d failed; %.0fs" % (len(failed), elapsed))


def test_c07_cross_shard_atomicity_and_isolation():
    t0 = time.perf_counter()
    problems = []
    kinds = set()
    for seed in range(200):
        o = run_xshard_case(seed)
        kinds.add((o.num_shards, o.theta, o.stalling, bool(o.lying)))
        iso = isolation_check(o.history, size=6, limit=10, seed=seed)
        if not o.ok or not iso.serializable or iso.mismatches:
            problems.append(seed)
    flagged = not check_serializability(split_payment_history()).serializable
    shards = {k[0] for k in kinds}
    thetas = {k[1] for k in kinds}
    covered = shards == {2, 3, 4} and thetas == {0.0, 1.0, 2.0} and any(k[2] for k in kinds) and \
        any(k[3] for k in kinds)
    elapsed = time.perf_counter() - t0
    ok = not problems and flagged and covered and elapsed < 900
    verdict(7, ok, "200 traces, %d bad; coverage ok=%s; split-payment history flagged=%s; %.0fs"
            % (len(problems), covered, flagged, elapsed))


def test_c08_stalling_coordinator():
    t0 = time.perf_counter()
    bad = []
    for seed in range(100):
        o = run_xshard_case(seed, cross=True, force_stalling=True)
        a = o.atomicity
        if not (o.stalling and a.ok and a.terminated == a.begun and not a.dangling_locks):
            bad.append(seed)
    elapsed = time.perf_counter() - t0
    verdict(8, not bad and elapsed < 300, "100 stalling-client traces, %d with unterminated tx or held locks; %.0fs"
            % (len(bad), elapsed))


def test_c09_rollback_defense():
    t0 = time.perf_counter()
    bad = [s for s in range(100) if not run_rollback_trace(s).ok]
    elapsed = time.perf_counter() - t0
    verdict(9, not bad and elapsed < 300, "100 stale-seal restarts, %d violations; %.0fs" % (len(bad), elapsed))


def test_c10_reconfiguration():
    t0 = time.perf_counter()
    parts = []
    ok = True
    for seed in range(3):
        b = epoch_transition_scenario(seed=seed, n=16, mode="batched")
        v = epoch_transition_scenario(seed=seed, n=16, mode="naive")
        ok &= b.B == int(math.log2(16)) and b.B <= b.f
        ok &= b.zero_windows == 0 and b.transition_min >= 0.5 * b.baseline_median and v.zero_windows >= 1
        parts.append("seed %d: B=%d min %.0f / median %.0f, naive zero windows %d"
                     % (seed, b.B, b.transition_min, b.baseline_median, v.zero_windows))
    elapsed = time.perf_counter() - t0
    verdict(10, ok and elapsed < 600, "; ".join(parts) + "; %.0fs" % elapsed)


def test_c11_scaling_and_aborts():
    t0 = time.perf_counter()
    reps = scaling_sweep((1, 2, 4, 8))
    thr = [r.throughput for r in reps]
    ratio = thr[2] / thr[0]
    monotone = all(a <= b for a, b in zip(thr, thr[1:]))
    rows = abort_sweep()
    rates = [r for _, r, _ in rows]
    aborts_up = all(a <= b for a, b in zip(rates, rates[1:]))
    green = all(r.green for r in reps) and all(x.green for _, _, xs in rows for x in xs)
    elapsed = time.perf_counter() - t0
    ok = ratio >= 3.0 and monotone and aborts_up and green and elapsed < 1200
    verdict(11, ok, "throughput %s (4/1 ratio %.2f); abort rate by theta %s; oracles green=%s; %.0fs"
            % ([round(x) for x in thr], ratio, [round(x, 4) for x in rates], green, elapsed))


def test_c12_poet_plus_fewer_stale_blocks():
    t0 = time.perf_counter()
    res = compare_poet(n=128, seeds=range(30))
    elapsed = time.perf_counter() - t0
    ok = res["poet_plus"] < res["poet"] and res["p_value"] < 0.05 and elapsed < 600
    verdict(12, ok, "stale rate PoET %.4f, PoET+ %.4f, one-sided p=%.2e; %.0fs"
            % (res["poet"], res["poet_plus"], res["p_value"], elapsed))


def test_c13_cross_shard_probability():
    t0 = time.perf_counter()
    samples = 1_000_000
    ok = True
    parts = []
    for d, k in ((2, 2), (3, 4), (5, 8)):
        exact = cross_shard_probability(d, k)
        ok &= abs(sum(exact.values()) - 1) <= 1e-9
        mc = cross_shard_monte_carlo(d, k, samples, seed=d * 10 + k)
        worst = max(abs(mc.get(x, 0.0) - p) / math.sqrt(p * (1 - p) / samples) for x, p in exact.items() if 0 < p < 1)
        ok &= worst <= 3
        parts.append("(d=%d,k=%d) max dev %.2f sigma" % (d, k, worst))
    elapsed = time.perf_counter() - t0
    verdict(13, ok and elapsed < 120, "; ".join(parts) + "; %.0fs" % elapsed)


def _fingerprints():
    small_bench = run_benchmark(SimConfig(seed=3, delay=Uniform(0.001, 0.005), duration=1.0),
                                WorkloadSpec(clients=3, theta=1.0, key_space=40, duration=1.0),
                                ShardConfig(num_shards=2, batch_size=8))[0]
    return {
        "consensus": [run_consensus_trace(v, 7, a).trace_digest for v in Variant for a in ATTACKS],
        "crash_leader": run_consensus_trace(Variant.AHLR, 3, "crash_leader").trace_digest,
        "xshard": run_xshard_case(5, cross=True, force_stalling=True).trace_digest,
        "rollback": run_rollback_trace(4).trace_digest,
        "transition": epoch_transition_scenario(seed=1, n=8, mode="batched", baseline=3.0, tail=2.0).to_json(),
        "bench": json.dumps(small_bench.to_json(), sort_keys=True, default=str),
        "poet": simulate_chain(PoetConfig(n=32), 60, seed=2).csv_row(),
        "beacon": beacon_repeat_monte_carlo(3, 16, 2000, seed=9),
        "xshard_mc": cross_shard_monte_carlo(3, 4, 20_000, seed=1),
    }


def test_c14_determinism():
    a = _fingerprints()
    b = _fingerprints()
    differing = sorted(k for k in a if a[k] != b[k])
    verdict(14, not differing, "re-run with the same seeds: %d/%d components identical%s"
            % (len(a) - len(differing), len(a), (", differing: %s" % differing) if differing else ""))
