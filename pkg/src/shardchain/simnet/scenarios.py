"""Ready-made simulations: consensus under attack, crash recovery, epoch transitions."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

from ..consensus import (
    ConsensusConfig,
    EquivocatingReplica,
    Replica,
    Variant,
    committee_checkpoint_sync,
    make_signer,
)
from ..enclave import load_costs
from ..ledger import KvUpdate, LedgerState, Transaction, encode_int
from ..shardform import ScheduleError, TransitionSchedule
from .adversary import AdversarySpec, Crash, DelayMax, Drop, EquivocateSeq, StaleSealOnRestart
from .engine import ConfigError, Metrics, Simulator, Trace
from .hosts import Client, Network, ReplicaHost
from .network import DelayModel, Uniform, delay_model_from_json


@dataclass
class SimConfig:
    seed: int = 0
    delay: DelayModel = field(default_factory=lambda: Uniform(0.001, 0.01))
    delta: float = 6.0
    rto: float = 0.2
    loss: float = 0.0
    adversary: AdversarySpec = field(default_factory=AdversarySpec)
    duration: float = 60.0

    def validate(self) -> None:
        if self.duration <= 0 or self.rto <= 0 or self.delta <= 0:
            raise ConfigError("duration, rto and delta must be positive")
        if not 0 <= self.loss < 1:
            raise ConfigError("loss must lie in [0, 1)")

    def to_json(self) -> dict:
        return {"seed": self.seed, "delay": self.delay.to_json(), "delta": self.delta, "rto": self.rto,
                "loss": self.loss, "duration": self.duration,
                "byzantine": sorted(self.adversary.byzantine, key=repr)}

    @classmethod
    def from_json(cls, d: dict) -> "SimConfig":
        return cls(seed=int(d.get("seed", 0)), delay=delay_model_from_json(d.get("delay", {"type": "Uniform",
                                                                                           "lo": 0.001, "hi": 0.01})),
                   delta=float(d.get("delta", 6.0)), rto=float(d.get("rto", 0.2)), loss=float(d.get("loss", 0.0)),
                   duration=float(d.get("duration", 60.0)))


def run_simulation(config: SimConfig, topology: Callable[[Simulator, Network], Optional[Callable[[], bool]]],
                   trace_keep=None) -> tuple[Trace, Metrics]:
    """Build the topology on a fresh simulator and run to quiescence, the stop predicate or the duration."""
    config.validate()
    sim = Simulator(config.seed, trace_keep)
    net = Network(sim, config.delay, config.adversary, loss=config.loss, rto=config.rto)
    stop_when = topology(sim, net)
    sim.run(until=config.duration, stop_when=stop_when)
    return sim.trace, sim.metrics


# -- committees ---------------------------------------------------------------


class Cluster:
    """One committee of replica hosts sharing a simulator and network."""

    def __init__(self, sim: Simulator, net: Network, config: ConsensusConfig, node_ids: Sequence[int], seed=0,
                 state: Optional[LedgerState] = None, byzantine: Optional[dict] = None, validator=None,
                 costs: Optional[dict] = None, base_cost: float = 20e-6, app_factory=None,
                 roster: Optional[Sequence] = None, label: str = ""):
        self.sim, self.net, self.config = sim, net, config
        self.seed = seed
        self.label = label
        self.costs = costs if costs is not None else load_costs()
        self.base_cost = base_cost
        self.validator = validator
        self.app_factory = app_factory
        byzantine = byzantine or {}
        self.signers = {nid: self._signer(nid) for nid in node_ids}
        self.keys = {nid: s.public_key for nid, s in self.signers.items()}
        net.keys.update(self.keys)
        self.roster = list(roster if roster is not None else node_ids)
        self.hosts: dict[int, ReplicaHost] = {}
        for nid in node_ids:
            cls = byzantine.get(nid, Replica)
            rep = cls(nid, config, self.roster, self.signers[nid], self.keys, state, validator)
            self.hosts[nid] = self._host(rep)

    def _signer(self, nid):
        return make_signer(self.config.variant, nid, self.seed, costs=self.costs, clock=lambda: self.sim.now)

    def _host(self, rep: Replica) -> ReplicaHost:
        app = self.app_factory(rep) if self.app_factory else None
        return ReplicaHost(self.sim, self.net, rep, self.base_cost, app=app)

    @property
    def members(self) -> list[int]:
        return [m for m in self.roster if m is not None]

    def live_members(self) -> list[int]:
        return [m for m in self.members if m in self.hosts and not self.hosts[m].crashed]

    def honest(self) -> list[ReplicaHost]:
        bad = self.net.adversary.byzantine
        return [h for nid, h in sorted(self.hosts.items()) if nid not in bad]

    def start(self) -> None:
        for h in self.hosts.values():
            h._sync_timers()


def safety_violations(hosts: Sequence[ReplicaHost]) -> list[tuple[int, str, str]]:
    """Sequence numbers at which two hosts executed different blocks."""
    seen: dict[int, tuple[int, bytes]] = {}
    bad = []
    for h in hosts:
        for _, seq, digest in h.executed_log:
            prev = seen.setdefault(seq, (h.node_id, digest))
            if prev[1] != digest:
                bad.append((seq, prev[1].hex(), digest.hex()))
    return bad


def kv_workload(client: str, rng: random.Random, keys: int = 64, limit: Optional[int] = None) -> Iterator[Transaction]:
    i = 0
    while limit is None or i < limit:
        k = b"k%03d" % rng.randrange(keys)
        yield Transaction("%s-%d" % (client, i), KvUpdate(((k, encode_int(i)),)), client)
        i += 1


# -- consensus traces ---------------------------------------------------------

ATTACKS = ("equivocate", "crash", "drop", "delaymax")


@dataclass
class ConsensusOutcome:
    variant: str
    seed: int
    attack: str
    n: int
    f: int
    byzantine: tuple
    violations: list
    valid_equivocations: int
    executed_all: bool
    issued: int
    completed: int
    view_changes: int
    trace_digest: str
    metrics: dict

    @property
    def safe(self) -> bool:
        return not self.violations

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["byzantine"] = list(self.byzantine)
        return d


def committee_shape(variant: Variant, f: int) -> int:
    return 3 * f + 1 if Variant(variant) is Variant.HL else 2 * f + 1


def run_consensus_trace(variant, seed: int, attack: str = "none", f: Optional[int] = None, requests: int = 24,
                        rate: float = 200.0, batch_size: int = 4, delay: Optional[DelayModel] = None,
                        duration: float = 120.0, trace_keep=None, byzantine: Optional[Sequence[int]] = None,
                        crash_at: Optional[float] = None, loss: float = 0.0) -> ConsensusOutcome:
    """One committee, one open-loop client, one attack.

    ``attack`` is one of ``none``, ``equivocate``, ``crash``, ``drop``,
    ``delaymax`` or ``crash_leader``.  Unless ``byzantine`` is given, the
    seed picks up to f misbehaving members (the leader always misbehaves
    under ``equivocate`` and ``crash_leader``).
    """
    variant = Variant(variant)
    rng = random.Random("consensus|%s|%d|%s" % (variant.value, seed, attack))
    if f is None:
        f = rng.choice((1, 2))
    n = committee_shape(variant, f)
    nodes = list(range(n))
    if byzantine is None:
        if attack == "none":
            byzantine = []
        elif attack in ("equivocate", "crash_leader"):
            byzantine = [0] + rng.sample(nodes[1:], rng.randint(0, f - 1))
        else:
            byzantine = rng.sample(nodes, rng.randint(1, f))
    byzantine = sorted(byzantine)
    behaviors: dict = {}
    classes: dict = {}
    for b in byzantine:
        if attack == "equivocate":
            behaviors[b] = (EquivocateSeq(),)
            classes[b] = EquivocatingReplica
        elif attack == "crash":
            behaviors[b] = (Crash(crash_at if crash_at is not None else rng.uniform(0.0, 0.1)),)
        elif attack == "crash_leader":
            behaviors[b] = (Crash(crash_at if crash_at is not None else 0.0),)
        elif attack == "drop":
            behaviors[b] = (Drop(0.2),)
        elif attack == "delaymax":
            behaviors[b] = (DelayMax(0.05),)
    adv = AdversarySpec(frozenset(byzantine), behaviors)
    adv.validate(nodes, ["client"], max_byzantine=f)
    cfg = ConsensusConfig(variant, n, f, batch_size=batch_size, batch_timeout=0.01, K=8, L=32,
                          request_timeout=0.5, view_change_timeout=0.5)
    sim = Simulator(seed, trace_keep)
    net = Network(sim, delay or Uniform(0.001, 0.01), adv, loss=loss)
    cluster = Cluster(sim, net, cfg, nodes, seed=seed, byzantine=classes)
    wl = kv_workload("client", random.Random(seed), limit=requests)
    client = Client(sim, net, "client", nodes, f + 1, wl, mode="open", rate=rate, retry=1.0,
                    entry=nodes[1 + seed % (n - 1)] if attack == "crash_leader" else None)
    cluster.start()
    sim.run(until=duration, stop_when=lambda: client.exhausted and not client.outstanding)
    sim.run(until=sim.now + 2.0)
    honest = cluster.honest()
    issued = {f"client-{i}" for i in range(client.issued)}
    executed_all = all(all(t in h.replica.state.txlog for t in issued) for h in honest)
    return ConsensusOutcome(variant.value, seed, attack, n, f, tuple(byzantine), safety_violations(honest),
                            len(net.equivocations), executed_all, client.issued, len(client.done),
                            sim.metrics.view_changes, sim.trace.digest, sim.metrics.summary())


# -- rollback defence ----------------------------------------------------------


@dataclass
class RollbackOutcome:
    seed: int
    node: int
    H: Optional[int]
    H_M: Optional[int]
    ckp_M: Optional[int]
    recovered_at_seq: Optional[int]
    appends_before_recovery: int
    completed: bool
    trace_digest: str

    @property
    def ok(self) -> bool:
        return (self.completed and self.H is not None and self.H_M is not None and self.H_M >= self.H
                and self.appends_before_recovery == 0 and self.recovered_at_seq is not None
                and self.recovered_at_seq >= self.H_M)


def run_rollback_trace(seed: int, f: int = 1, K: int = 2, L: int = 4, duration: float = 60.0,
                       pause: Optional[bool] = None, trace_keep=None) -> RollbackOutcome:
    """A host seals its enclave state, keeps running, crashes and relaunches it from the old seal.

    Recovery needs 2f+1 peer reports, so the committee has 2f+2 members.
    """
    rng = random.Random("rollback|%d" % seed)
    n = 2 * f + 2
    nodes = list(range(n))
    victim = rng.randrange(1, n)
    seal_at = rng.uniform(0.2, 1.0)
    crash_at = seal_at + rng.uniform(0.2, 1.5)
    restart_at = crash_at + rng.uniform(0.1, 1.0)
    adv = AdversarySpec(frozenset([victim]), {victim: (StaleSealOnRestart(seal_at, crash_at, restart_at),)})
    adv.validate(nodes, max_byzantine=f)
    cfg = ConsensusConfig(Variant.AHLPlus, n, f, batch_size=2, batch_timeout=0.01, K=K, L=L,
                          request_timeout=0.5, view_change_timeout=0.5)
    sim = Simulator(seed, trace_keep)
    net = Network(sim, Uniform(0.001, 0.01), adv)
    cluster = Cluster(sim, net, cfg, nodes, seed=seed)
    host = cluster.hosts[victim]
    state = {"appends": 0, "done_seq": None, "restarted": False}

    orig_drain = host._drain_replica

    def drain():
        for event, payload in host.replica.trace:
            if host.restarted_at is not None and state["done_seq"] is None:
                if event == "append":
                    state["appends"] += 1
                elif event == "recovery_complete":
                    state["done_seq"] = payload["seq"]
        return orig_drain()

    host._drain_replica = drain
    wl = kv_workload("client", random.Random(seed))
    if pause is None:
        pause = seed % 2 == 0
    # with ``pause`` the load stops while the victim is down, so peers are not far ahead of it
    Client(sim, net, "client", nodes, f + 1, wl, mode="open", rate=100.0, retry=1.0,
           entry=0, stop_at=crash_at if pause else restart_at + 8.0)
    if pause:
        Client(sim, net, "client2", nodes, f + 1, kv_workload("client2", random.Random(seed + 1)), mode="open",
               rate=100.0, retry=1.0, entry=0, start_at=restart_at + 0.5, stop_at=restart_at + 8.0)
    cluster.start()
    sim.run(until=duration, stop_when=lambda: state["done_seq"] is not None)
    est = host.replica.recovery
    return RollbackOutcome(seed, victim, host.crash_height, est.H_M if est else None, est.ckp_M if est else None,
                           state["done_seq"], state["appends"], state["done_seq"] is not None, sim.trace.digest)


# -- epoch transition ---------------------------------------------------------


@dataclass
class TransitionOutcome:
    mode: str
    B: int
    f: int
    n: int
    window: float
    baseline_median: float
    transition_min: float
    series: list
    transition_start: float
    transition_end: float
    moves: int
    zero_windows: int
    trace_digest: str

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _median(xs):
    xs = sorted(xs)
    if not xs:
        return 0.0
    m = len(xs) // 2
    return xs[m] if len(xs) % 2 else (xs[m - 1] + xs[m]) / 2


def epoch_transition_scenario(seed: int = 0, n: int = 16, f: Optional[int] = None, B: Optional[int] = None,
                              mode: str = "batched", variant=Variant.AHL, rate: float = 200.0,
                              window: float = 1.0, warmup: float = 3.0, baseline: float = 6.0,
                              sync_time: float = 2.0, tail: float = 6.0, schedule: Optional[TransitionSchedule] = None,
                              trace_keep=None) -> TransitionOutcome:
    """Replace every member of one committee, either B at a time or all at once.

    A leaving member stops at the start of its batch and its seat goes
    vacant; its replacement runs :func:`committee_checkpoint_sync` against
    the live members (taking ``sync_time``) and only then takes the seat.
    The next batch starts when the previous one has fully joined.
    """
    import math

    variant = Variant(variant)
    if f is None:
        f = (n - 1) // 3 if variant is Variant.HL else (n - 1) // 2
    if B is None:
        B = int(math.floor(math.log2(n)))
    if mode not in ("batched", "naive"):
        raise ConfigError("mode is 'batched' or 'naive'")
    cfg = ConsensusConfig(variant, n, f, batch_size=16, batch_timeout=0.02, K=8, L=64,
                          request_timeout=0.5, view_change_timeout=0.5)
    sim = Simulator(seed, trace_keep)
    net = Network(sim, Uniform(0.001, 0.01), AdversarySpec(), trace_messages=False)
    old = list(range(n))
    cluster = Cluster(sim, net, cfg, old, seed=seed)
    rng = random.Random("transition|%d" % seed)
    if schedule is not None:
        order = [m.node for m in schedule.moves]
        batches = [[m.node for m in b] for b in schedule.batches]
        if any(len(b) > schedule.B for b in batches):
            raise ScheduleError("batch larger than B")
    else:
        order = old[:]
        rng.shuffle(order)
        batches = [order[i:i + B] for i in range(0, n, B)] if mode == "batched" else [order]
    replacement = {nid: n + i for i, nid in enumerate(order)}

    def directory():
        return cluster.live_members()

    client = Client(sim, net, "client", old, f + 1, kv_workload("client", random.Random(seed)), mode="open",
                     rate=rate, retry=1.0, outstanding_cap=100000, directory=directory)
    start = warmup + baseline
    marks = {"start": start, "end": None}

    def roster_update():
        for h in list(cluster.hosts.values()):
            if not h.crashed:
                h.replica.now = sim.now
                out = h.replica.set_roster(cluster.roster, cluster.keys)
                out += h._drain_replica()
                h._emit(out, max(sim.now, h.busy_until))
                h._sync_timers()

    def begin_batch(i):
        if i >= len(batches):
            marks["end"] = sim.now
            sim.record(None, "transition_end", {})
            return
        batch = batches[i]
        sim.record(None, "batch_begin", {"batch": i, "nodes": batch})
        for nid in batch:
            cluster.hosts[nid].crash()
            cluster.roster[cluster.roster.index(nid)] = None
        roster_update()
        sim.after(sync_time, None, finish_batch, i)

    def finish_batch(i):
        live = [cluster.hosts[m].replica for m in cluster.live_members()]
        if not live:
            # nobody is running (swap-all): fetch from the stopped members' stored state
            live = [cluster.hosts[m].replica for m in batches[i]]
        for nid in batches[i]:
            new = replacement[nid]
            signer = cluster._signer(new)
            cluster.signers[new] = signer
            cluster.keys[new] = signer.public_key
            net.keys[new] = signer.public_key
        for nid in batches[i]:
            new = replacement[nid]
            cluster.roster[old.index(nid)] = new
        for nid in batches[i]:
            new = replacement[nid]
            rep = Replica(new, cfg, cluster.roster, cluster.signers[new], cluster.keys, None, cluster.validator)
            rep.active = False
            rep.now = sim.now
            if live:
                committee_checkpoint_sync(rep, live)
                view = max(r.view for r in live)
                rep.view = view
                rep.signer.enter_view(view)
            rep.active = True
            cluster.hosts[new] = cluster._host(rep)
        roster_update()
        for nid in batches[i]:
            h = cluster.hosts[replacement[nid]]
            h._emit(h.replica.catch_up(), max(sim.now, h.busy_until))
        sim.record(None, "batch_end", {"batch": i})
        sim.after(0.0, None, begin_batch, i + 1)

    sim.schedule(start, None, begin_batch, 0)
    cluster.start()
    sim.run(until=start + 600.0, stop_when=lambda: marks["end"] is not None)
    end = marks["end"] if marks["end"] is not None else sim.now
    sim.run(until=end + tail)
    m = sim.metrics
    base = m.throughput_series(window, warmup, start)
    t_end = start + window * max(1, math.ceil((end - start) / window))
    during = m.throughput_series(window, start, t_end)
    series = m.throughput_series(window, 0.0, end + tail)
    return TransitionOutcome(mode, B, f, n, window, _median(base), min(during) if during else 0.0, series,
                             start, end, n, sum(1 for x in during if x == 0), sim.trace.digest)
