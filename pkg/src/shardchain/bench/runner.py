"""Benchmark runner: wires workload clients to shards and reports simulated-time metrics."""

from __future__ import annotations

import csv
import io
import random
from dataclasses import asdict, dataclass, field
from typing import Optional

from ..consensus import Variant
from ..simnet.engine import Simulator, Trace
from ..simnet.hosts import Client, Network
from ..simnet.network import Uniform
from ..simnet.scenarios import SimConfig, safety_violations
from ..simnet.xshard import XClient, XShardOutcome, build_sharded_system, run_xshard_trace, total_balance
from ..coordination import check_atomicity
from .serializability import HistoryRecorder, brute_force_serializable, check_serializability, sub_histories
from .workload import Benchmark, WorkloadSpec, cross_only, generate_workload, initial_balances, shard_keys

REPORT_COLUMNS = ("seed", "shards", "benchmark", "theta", "clients", "with_ref", "throughput", "p50", "p95", "p99",
                  "abort_rate", "issued", "committed", "aborted", "pending", "view_changes", "dropped", "green")


@dataclass(frozen=True)
class ShardConfig:
    num_shards: int = 1
    with_ref: bool = True
    ref_instances: int = 1
    variant: Variant = Variant.AHLPlus
    f: int = 1
    batch_size: int = 64
    batch_timeout: float = 0.01


@dataclass
class MetricsReport:
    seed: int
    shards: int
    benchmark: str
    theta: float
    clients: int
    with_ref: bool
    throughput: float
    latency: dict
    abort_rate: float
    issued: int
    committed: int
    aborted: int
    pending: int
    view_changes: int
    dropped: int
    per_shard: dict = field(default_factory=dict)
    stale_rate: Optional[float] = None
    oracles: dict = field(default_factory=dict)
    trace_digest: str = ""

    @property
    def green(self) -> bool:
        return all(self.oracles.values()) if self.oracles else True

    @property
    def accounting_ok(self) -> bool:
        return self.issued == self.committed + self.aborted + self.pending

    def to_json(self) -> dict:
        d = asdict(self)
        d["green"] = self.green
        return d

    def csv_row(self) -> dict:
        lat = self.latency or {}
        return {"seed": self.seed, "shards": self.shards, "benchmark": self.benchmark, "theta": self.theta,
                "clients": self.clients, "with_ref": self.with_ref, "throughput": round(self.throughput, 3),
                "p50": lat.get("p50"), "p95": lat.get("p95"), "p99": lat.get("p99"),
                "abort_rate": round(self.abort_rate, 6), "issued": self.issued, "committed": self.committed,
                "aborted": self.aborted, "pending": self.pending, "view_changes": self.view_changes,
                "dropped": self.dropped, "green": self.green}


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS)
    w.writeheader()
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def _client_idle(c) -> bool:
    return c.finished if isinstance(c, XClient) else not c.outstanding


def run_benchmark(sim_config: SimConfig, spec: WorkloadSpec, shard_config: ShardConfig,
                  trace_keep=("xtx", "view_change", "redrive")) -> tuple[MetricsReport, Trace]:
    """Run one sharded deployment for ``spec.duration`` simulated seconds.

    With the reference committee, clients are closed-loop and may issue
    cross-shard transactions; without it, every client is pinned to one
    shard's keys and runs open-loop with ``spec.outstanding`` requests in
    flight (4 clients per shard are added when ``spec.clients`` is smaller).
    Throughput counts completions after a 10% warm-up.  The safety,
    atomicity and serializability oracles run on every report.
    """
    sim_config.validate()
    spec.validate()
    sim = Simulator(sim_config.seed, trace_keep)
    net = Network(sim, sim_config.delay, sim_config.adversary, loss=sim_config.loss, rto=sim_config.rto,
                  trace_messages=False)
    S = shard_config.num_shards
    balances = initial_balances(spec) if Benchmark(spec.benchmark) is Benchmark.SMALLBANK else {}
    system = build_sharded_system(sim, net, S, balances, variant=shard_config.variant, f=shard_config.f,
                                  with_ref=shard_config.with_ref, ref_instances=shard_config.ref_instances,
                                  batch_size=shard_config.batch_size, batch_timeout=shard_config.batch_timeout,
                                  seed=sim_config.seed)
    recorder = HistoryRecorder(S)
    recorder.attach(system)
    per_shard_done: dict[int, int] = {s: 0 for s in range(S)}
    for s, cl in system.shards.items():
        h0 = cl.honest()[0]
        h0.on_execute.append(lambda host, block, receipts, s=s: per_shard_done.__setitem__(
            s, per_shard_done[s] + len(receipts)))
    clients = []
    if shard_config.with_ref:
        for i in range(spec.clients):
            cid = "client%d" % i
            wl = generate_workload(spec, sim.fork_rng("workload|" + cid), cid)
            c = XClient(sim, net, cid, system.directory, wl, outstanding=1, stop_at=spec.duration)
            clients.append(c)
    else:
        n_clients = max(spec.clients, 4 * S)
        owned = {s: shard_keys(spec, s, S) for s in range(S)}
        for i in range(n_clients):
            s = i % S
            cid = "client%d" % i
            wl = generate_workload(spec, sim.fork_rng("workload|" + cid), cid, restrict=owned[s])
            info = system.directory.shards[s]
            c = Client(sim, net, cid, info.members, info.quorum, wl, mode=spec.mode, rate=spec.rate,
                       outstanding_cap=spec.outstanding, retry=5.0, stop_at=spec.duration)
            clients.append(c)
    system.clients = [c for c in clients if isinstance(c, XClient)]
    sim.run(until=spec.duration)
    m = sim.metrics
    warm = 0.1 * spec.duration
    thr = m.throughput(warm, spec.duration)
    # oracles: drain in-flight work first so final states are comparable
    drain_until = spec.duration + 30.0
    sim.run(until=drain_until, stop_when=lambda: all(_client_idle(c) for c in clients)
            and all(not h.app.timers for r in system.refs for h in r.honest()))
    sim.run(until=sim.now + 3.0)
    honest_states = system.honest_states()
    safety = []
    for cl in list(system.shards.values()) + system.refs:
        safety += safety_violations(cl.honest())
    oracles = {"safety": not safety, "serializability": check_serializability(recorder.history()).serializable}
    if system.refs:
        records = {k: v for k, v in system.records().items() if v is not None}
        oracles["atomicity"] = not check_atomicity(records, honest_states).atomicity_violations
    if balances:
        accounts = sorted(balances)
        oracles["conservation"] = total_balance(system.genesis, accounts) == total_balance(
            {s: sts[0] for s, sts in honest_states.items()}, accounts)
    done = m.committed + m.aborted
    report = MetricsReport(sim_config.seed, S, Benchmark(spec.benchmark).value, spec.theta, len(clients),
                           shard_config.with_ref, thr, m.latency_percentiles(), m.aborted / done if done else 0.0,
                           m.issued, m.committed, m.aborted, m.pending, m.view_changes, m.dropped,
                           {str(s): v for s, v in per_shard_done.items()}, None, oracles, sim.trace.digest)
    return report, sim.trace


def scaling_sweep(shard_counts=(1, 2, 4, 8), seed: int = 0, duration: float = 2.0, theta: float = 0.0,
                  benchmark: Benchmark = Benchmark.SMALLBANK, rate: float = 3000.0) -> list[MetricsReport]:
    """Throughput against shard count without the reference committee (single-shard txs, open loop)."""
    out = []
    for S in shard_counts:
        spec = WorkloadSpec(benchmark, clients=4 * S, mode="open", theta=theta, key_space=1000 * S,
                            duration=duration, outstanding=128, rate=rate)
        cfg = SimConfig(seed=seed, delay=Uniform(0.001, 0.005), duration=duration)
        rep, _ = run_benchmark(cfg, spec, ShardConfig(num_shards=S, with_ref=False))
        out.append(rep)
    return out


def abort_sweep(thetas=(0.0, 1.0, 2.0), seeds=(0, 1, 2), shards: int = 2, clients: int = 8, duration: float = 10.0,
                key_space: int = 1000, benchmark: Benchmark = Benchmark.SMALLBANK) -> list[tuple[float, float, list]]:
    """Mean abort rate per Zipf theta with coordinated cross-shard transactions (closed loop)."""
    rows = []
    for theta in thetas:
        reps = []
        for seed in seeds:
            spec = WorkloadSpec(benchmark, clients=clients, mode="closed", theta=theta, key_space=key_space,
                                duration=duration)
            cfg = SimConfig(seed=seed, delay=Uniform(0.001, 0.005), duration=duration)
            rep, _ = run_benchmark(cfg, spec, ShardConfig(num_shards=shards, with_ref=True, batch_size=16))
            reps.append(rep)
        total = sum(r.committed + r.aborted for r in reps)
        rate = sum(r.aborted for r in reps) / total if total else 0.0
        rows.append((theta, rate, reps))
    return rows


def xshard_case(seed: int) -> dict:
    """Parameters of the seeded multi-shard trace family used by the atomicity/isolation suite."""
    rng = random.Random("xshard-case|%d" % seed)
    S = rng.choice((2, 3, 4))
    theta = (0.0, 1.0, 2.0)[seed % 3]
    bench = rng.choice((Benchmark.SMALLBANK, Benchmark.KVSTORE))
    kind = ("plain", "stalling", "byzantine", "both")[(seed // 3) % 4]
    case = {"num_shards": S, "theta": theta, "benchmark": bench, "stalling": [], "stall_after": 0, "lying": {},
            "equivocating": []}
    if kind in ("stalling", "both"):
        case["stalling"] = sorted(rng.sample(range(4), rng.randint(1, 2)))
        case["stall_after"] = rng.randint(0, 3)
    if kind in ("byzantine", "both"):
        for s in range(S):
            if rng.random() < 0.6:
                member = 1000 * (s + 1) + rng.randrange(3)
                case["lying"][s] = [member]
                if rng.random() < 0.3:
                    case["equivocating"].append(member)
    return case


def run_xshard_case(seed: int, *, cross: bool = False, txs_per_client: int = 6, clients: int = 4,
                    key_space: int = 16, force_stalling: bool = False, trace_keep=None) -> XShardOutcome:
    """One trace of the seeded family; ``cross`` keeps only multi-shard transactions."""
    case = xshard_case(seed)
    if force_stalling and not case["stalling"]:
        rng = random.Random("xshard-stall|%d" % seed)
        case["stalling"] = sorted(rng.sample(range(clients), rng.randint(1, 2)))
        case["stall_after"] = rng.randint(0, 3)
    S = case["num_shards"]
    spec = WorkloadSpec(case["benchmark"], clients=clients, theta=case["theta"], key_space=key_space,
                        initial_balance=100)
    balances = initial_balances(spec) if case["benchmark"] is Benchmark.SMALLBANK else {}

    def factory(cid, rng):
        stream = generate_workload(spec, rng, cid)
        return cross_only(stream, S) if cross else stream

    return run_xshard_trace(seed, S, factory, balances, theta=case["theta"], clients=clients,
                            txs_per_client=txs_per_client, stalling=case["stalling"],
                            stall_after=case["stall_after"], lying=case["lying"],
                            equivocating=case["equivocating"], trace_keep=trace_keep)


@dataclass
class IsolationResult:
    serializable: bool
    sub_checked: int
    mismatches: list


def isolation_check(history, size: int = 6, limit: int = 20, seed: int = 0) -> IsolationResult:
    """Graph verdict on the full history, cross-checked against brute force on small projections."""
    full = check_serializability(history).serializable
    mismatches = []
    subs = sub_histories(history, size, limit=limit, rng=random.Random(seed))
    for sub in subs:
        fast = check_serializability(sub).serializable
        slow, _ = brute_force_serializable(sub)
        if fast != slow:
            mismatches.append(sorted(sub.commits))
    return IsolationResult(full, len(subs), mismatches)


@dataclass
class ConsensusBench:
    variant: str
    n: int
    f: int
    throughput: float
    dropped: int
    view_changes: int
    committed: int
    trace_digest: str


def consensus_bench(variant, n: int = 65, seed: int = 0, clients: int = 8, rate: float = 400.0,
                    duration: float = 4.0, queue_capacity: int = 512, batch_size: int = 64) -> ConsensusBench:
    """One committee under open-loop load whose requests arrive at every member (full queues)."""
    from ..consensus import ConsensusConfig
    from ..simnet.scenarios import Cluster, committee_shape, kv_workload

    variant = Variant(variant)
    f = (n - 1) // 3 if variant is Variant.HL else (n - 1) // 2
    if committee_shape(variant, f) != n:
        raise ValueError("n does not match the variant's committee shape")
    cfg = ConsensusConfig(variant, n, f, batch_size=batch_size, batch_timeout=0.01, K=16, L=64,
                          request_timeout=1.0, view_change_timeout=1.0, queue_capacity=queue_capacity)
    sim = Simulator(seed, ("view_change",))
    net = Network(sim, Uniform(0.001, 0.005), trace_messages=False)
    nodes = list(range(n))
    cluster = Cluster(sim, net, cfg, nodes, seed=seed)
    cs = [Client(sim, net, "client%d" % i, nodes, f + 1, kv_workload("client%d" % i, sim.fork_rng("cb%d" % i)),
                 mode="open", rate=rate, outstanding_cap=128, retry=0.5, stop_at=duration)
          for i in range(clients)]
    cluster.start()
    sim.run(until=duration)
    m = sim.metrics
    return ConsensusBench(variant.value, n, f, m.throughput(0.1 * duration, duration), m.dropped, m.view_changes,
                          m.committed, sim.trace.digest)
