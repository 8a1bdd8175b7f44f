"""Sharded deployment on the simulator: tx-committees, a reference committee and relaying clients."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

from ..consensus import ConsensusConfig, EquivocatingReplica, Reply, Variant
from ..coordination import (
    Ack,
    AckBundle,
    CommitteeInfo,
    Decision,
    Directory,
    LyingTxMemberApp,
    PrepareTx,
    RefMemberApp,
    RefState,
    TxMemberApp,
    Vote,
    VoteOp,
    begin_op,
    begin_txid,
    check_atomicity,
    fin_txid,
    load_record,
    prep_txid,
    ref_validator,
    shard_validator,
    split_transaction,
    verify_msg,
    vote_txid,
)
from ..ledger import (
    AbortPhaseOp,
    CommitPhaseOp,
    LedgerState,
    PreparePhaseOp,
    ReceiptStatus,
    RefCommitteeOp,
    Transaction,
    decode_int,
    shard_of,
)
from .adversary import AdversarySpec, StallingClient
from .engine import Simulator
from .hosts import ClientSubmit, Network, hash_index
from .network import DelayModel, Uniform
from .scenarios import Cluster, safety_violations

RELAY_STEPS = ("prepare", "vote", "decision", "ack")


@dataclass
class _Flow:
    tx: Transaction
    started: float
    cross: object = None
    relayed: int = 0
    last_progress: float = 0.0
    sent: dict = field(default_factory=dict)  # key -> (committee, Transaction)
    answered: set = field(default_factory=set)
    prep: dict = field(default_factory=dict)
    votes: dict = field(default_factory=dict)
    decisions: dict = field(default_factory=dict)
    acks: dict = field(default_factory=dict)
    acked: dict = field(default_factory=dict)
    replies: dict = field(default_factory=dict)
    decision: Optional[str] = None


class XClient:
    """Closed-loop client that relays coordination messages between committees.

    A ``StallingClient(after=k)`` behaviour makes it stop relaying after k
    steps of every cross-shard transaction (0 = it only sends BeginTx); it
    still listens, so it learns the outcome once the coordinator re-drives
    the transaction to completion.
    """

    def __init__(self, sim: Simulator, net: Network, client_id: str, directory: Directory,
                 workload: Iterator[Transaction], outstanding: int = 1, retry: float = 3.0,
                 stop_at: Optional[float] = None, max_tx: Optional[int] = None, start_at: float = 0.0):
        self.sim, self.net, self.dir = sim, net, directory
        self.client_id = client_id
        self.workload = workload
        self.cap = outstanding
        self.retry = retry
        self.stop_at = stop_at
        self.max_tx = max_tx
        stall = net.adversary.has(client_id, StallingClient)
        self.stall_after = None if stall is None else stall.after
        self.flows: dict[str, _Flow] = {}
        self.done: dict[str, str] = {}
        self.begun: list[str] = []
        self.issued = 0
        self.exhausted = False
        net.register(client_id, self)
        sim.schedule(start_at, client_id, self._tick)
        sim.schedule(start_at + retry, client_id, self._retry_check)

    @property
    def finished(self) -> bool:
        return not self.flows and (self.exhausted or (self.max_tx is not None and self.issued >= self.max_tx)
                                   or (self.stop_at is not None and self.sim.now >= self.stop_at))

    def _entry(self, info: CommitteeInfo):
        return info.members[hash_index(self.client_id, len(info.members))]

    def _submit(self, flow: _Flow, key, info: CommitteeInfo, tx: Transaction) -> None:
        flow.sent[key] = (info, tx)
        self.net.send(self.client_id, self._entry(info), ClientSubmit(tx, self.client_id))

    def _tick(self):
        while len(self.flows) < self.cap and not self.exhausted:
            if self.stop_at is not None and self.sim.now >= self.stop_at:
                return
            if self.max_tx is not None and self.issued >= self.max_tx:
                return
            try:
                tx = next(self.workload)
            except StopIteration:
                self.exhausted = True
                return
            self._issue(tx)

    def _issue(self, tx: Transaction):
        self.issued += 1
        self.sim.metrics.issued += 1
        flow = _Flow(tx, self.sim.now, last_progress=self.sim.now)
        self.flows[tx.txid] = flow
        cross = split_transaction(tx, self.dir.num_shards)
        if len(cross.involved) == 1:
            (s,) = cross.involved
            self._submit(flow, ("single", s), self.dir.shards[s], tx)
            return
        flow.cross = cross
        self.begun.append(tx.txid)
        self.sim.record(self.client_id, "xtx", {"txid": tx.txid, "step": "begin", "shards": sorted(cross.involved)})
        ref = self.dir.ref_for(tx.txid)
        self._submit(flow, ("begin",), ref, Transaction(begin_txid(tx.txid), RefCommitteeOp(begin_op(cross))))

    def _may_relay(self, flow: _Flow, step: str) -> bool:
        if self.stall_after is None:
            return True
        return RELAY_STEPS.index(step) < self.stall_after

    def _finish(self, flow: _Flow, status: str):
        self.flows.pop(flow.tx.txid, None)
        self.done[flow.tx.txid] = status
        m = self.sim.metrics
        if status == "Committed":
            m.committed += 1
        else:
            m.aborted += 1
        m.latencies.append(self.sim.now - flow.started)
        m.commit_times.append(self.sim.now)
        if flow.cross is not None:
            self.sim.record(self.client_id, "xtx", {"txid": flow.tx.txid, "step": "done", "status": status})
        self.sim.after(0.0, self.client_id, self._tick)

    def deliver(self, msg, src):
        if isinstance(msg, Reply):
            for txid, status in msg.results:
                flow = self.flows.get(txid)
                if flow is None or flow.cross is not None:
                    continue
                (s,) = split_transaction(flow.tx, self.dir.num_shards).involved
                voters = flow.replies.setdefault(status, set())
                if src in self.dir.shards[s].keys:
                    voters.add(src)
                if len(voters) >= self.dir.shards[s].quorum:
                    self._finish(flow, status)
            return
        flow = self.flows.get(getattr(msg, "txid", None))
        if flow is None or flow.cross is None:
            return
        ref = self.dir.ref_for(flow.tx.txid)
        if isinstance(msg, PrepareTx):
            self._on_prepare(flow, msg, ref)
        elif isinstance(msg, Vote):
            self._on_vote(flow, msg, ref)
        elif isinstance(msg, Decision):
            self._on_decision(flow, msg, ref)
        elif isinstance(msg, Ack):
            self._on_ack(flow, msg, ref)

    def _progress(self, flow: _Flow, key) -> None:
        flow.answered.add(key)
        flow.last_progress = self.sim.now

    def _on_prepare(self, flow, msg: PrepareTx, ref):
        if not verify_msg(msg, ref.keys):
            return
        self._progress(flow, ("begin",))
        bucket = flow.prep.setdefault(msg.committee, {})
        bucket[msg.sender] = msg
        good = [m for m in bucket.values() if m.content() == msg.content()]
        key = ("prepare", msg.committee)
        if len(good) >= ref.quorum and key not in flow.sent and self._may_relay(flow, "prepare"):
            ev = tuple(sorted(good, key=lambda m: str(m.sender)))[:ref.quorum]
            tx = Transaction(prep_txid(flow.tx.txid, msg.committee), PreparePhaseOp(flow.tx.txid, msg.subop), evidence=ev)
            self._submit(flow, key, self.dir.shards[msg.committee], tx)

    def _on_vote(self, flow, msg: Vote, ref):
        info = self.dir.shards.get(msg.committee)
        if info is None or not verify_msg(msg, info.keys):
            return
        bucket = flow.votes.setdefault((msg.committee, msg.verdict), {})
        bucket[msg.sender] = msg
        key = ("vote", msg.committee)
        if len(bucket) >= info.quorum:
            self._progress(flow, ("prepare", msg.committee))
            if key not in flow.sent and self._may_relay(flow, "vote"):
                ev = tuple(sorted(bucket.values(), key=lambda m: str(m.sender)))[:info.quorum]
                tx = Transaction(vote_txid(flow.tx.txid, msg.committee),
                                 RefCommitteeOp(VoteOp(flow.tx.txid, msg.committee, msg.verdict)), evidence=ev)
                self._submit(flow, key, ref, tx)

    def _on_decision(self, flow, msg: Decision, ref):
        if not verify_msg(msg, ref.keys):
            return
        bucket = flow.decisions.setdefault(msg.decision, {})
        bucket[msg.sender] = msg
        if len(bucket) < ref.quorum:
            return
        for s in flow.cross.involved:
            self._progress(flow, ("vote", s))
        if flow.decision is None:
            flow.decision = msg.decision.value
            self.sim.record(self.client_id, "xtx", {"txid": flow.tx.txid, "step": "decision",
                                                    "decision": msg.decision.value})
        if not self._may_relay(flow, "decision"):
            return
        ev = tuple(sorted(bucket.values(), key=lambda m: str(m.sender)))[:ref.quorum]
        commit = msg.decision.value == "CommitTx"
        op = CommitPhaseOp(flow.tx.txid) if commit else AbortPhaseOp(flow.tx.txid)
        tx = Transaction(fin_txid(flow.tx.txid) + (":c" if commit else ":a"), op, evidence=ev)
        for s in sorted(flow.cross.involved):
            key = ("final", s)
            if key not in flow.sent:
                self._submit(flow, key, self.dir.shards[s], tx)

    def _on_ack(self, flow, msg: Ack, ref):
        info = self.dir.shards.get(msg.committee)
        if info is None or not verify_msg(msg, info.keys):
            return
        bucket = flow.acks.setdefault((msg.committee, msg.status), {})
        bucket[msg.sender] = msg
        if len(bucket) >= info.quorum and msg.committee not in flow.acked:
            flow.acked[msg.committee] = (msg.status, tuple(bucket.values())[:info.quorum])
            self._progress(flow, ("final", msg.committee))
        if set(flow.acked) >= set(flow.cross.involved):
            statuses = {st for st, _ in flow.acked.values()}
            status = "Committed" if statuses == {"committed"} else "Aborted"
            if self._may_relay(flow, "ack"):
                bundle = AckBundle(flow.tx.txid, tuple(a for _, acks in flow.acked.values() for a in acks))
                for m in ref.members:
                    self.net.send(self.client_id, m, bundle)
            self._finish(flow, status)

    def _retry_check(self):
        now = self.sim.now
        for flow in list(self.flows.values()):
            if now - flow.last_progress < self.retry:
                continue
            for key, (info, tx) in flow.sent.items():
                if key in flow.answered:
                    continue
                for m in info.members:
                    self.net.send(self.client_id, m, ClientSubmit(tx, self.client_id))
            flow.last_progress = now
        if not self.finished:
            self.sim.after(self.retry, self.client_id, self._retry_check)


# -- deployment -------------------------------------------------------------------


@dataclass
class ShardedSystem:
    sim: Simulator
    net: Network
    directory: Directory
    refs: list
    shards: dict
    clients: list
    genesis: dict

    def honest_states(self) -> dict[int, list[LedgerState]]:
        return {s: [h.replica.state for h in c.honest()] for s, c in self.shards.items()}

    def records(self) -> dict:
        out = {}
        for c in self.clients:
            for txid in getattr(c, "begun", []):
                ref = self.refs[self.directory.refs.index(self.directory.ref_for(txid))]
                host = ref.honest()[0]
                rec = load_record(host.replica.state.kv, txid)
                if rec is not None:
                    out[txid] = rec
                else:
                    out[txid] = None
        return out

    def quiet(self) -> bool:
        if not all(c.finished for c in self.clients):
            return False
        return all(not h.app.timers for r in self.refs for h in r.honest())


def build_sharded_system(sim: Simulator, net: Network, num_shards: int, balances: dict, *, variant=Variant.AHLPlus,
                         f: int = 1, ref_instances: int = 1, with_ref: bool = True, lying: Optional[dict] = None,
                         equivocating: Sequence[int] = (), batch_size: int = 16, batch_timeout: float = 0.01,
                         request_timeout: float = 1.0, redrive_timeout: float = 2.0, seed: int = 0,
                         base_cost: float = 20e-6) -> ShardedSystem:
    """Committees of 2f+1 (trusted variants) or 3f+1 (HL) nodes for each shard plus the coordinator.

    ``balances`` maps account name to opening balance; each account lands on
    the shard that owns its key.  ``lying`` maps shard -> member ids that sign
    flipped verdicts; ``equivocating`` members also run the equivocating
    consensus replica.
    """
    variant = Variant(variant)
    n = 3 * f + 1 if variant is Variant.HL else 2 * f + 1
    cfg = ConsensusConfig(variant, n, f, batch_size=batch_size, batch_timeout=batch_timeout, K=32, L=128,
                          request_timeout=request_timeout, view_change_timeout=request_timeout)
    directory = Directory(num_shards=num_shards)
    lying = lying or {}
    genesis: dict[int, LedgerState] = {}
    per_shard: dict[int, dict] = {s: {} for s in range(num_shards)}
    for acc, bal in balances.items():
        per_shard[shard_of(acc.encode(), num_shards)][acc] = bal
    from ..ledger import genesis as make_genesis

    shards: dict[int, Cluster] = {}
    for s in range(num_shards):
        nodes = [1000 * (s + 1) + i for i in range(n)]
        genesis[s] = make_genesis(per_shard[s])
        bad = set(lying.get(s, ()))

        def app_factory(rep, s=s, bad=bad):
            return (LyingTxMemberApp if rep.node_id in bad else TxMemberApp)(directory, s)

        byz = {nid: EquivocatingReplica for nid in nodes if nid in set(equivocating)}
        cl = Cluster(sim, net, cfg, nodes, seed=seed, state=genesis[s], byzantine=byz,
                     validator=shard_validator(directory, s), app_factory=app_factory, base_cost=base_cost,
                     label=f"shard{s}")
        shards[s] = cl
        directory.shards[s] = CommitteeInfo(s, tuple(nodes), dict(cl.keys), cfg.quorum)
    refs = []
    if with_ref:
        for r in range(ref_instances):
            nodes = [100 * r + i for i in range(n)]
            info = CommitteeInfo("R%d" % r, tuple(nodes), {}, cfg.quorum)
            directory.refs.append(info)
            cl = Cluster(sim, net, cfg, nodes, seed=seed, state=LedgerState(),
                         validator=ref_validator(directory, info),
                         app_factory=lambda rep, info=info: RefMemberApp(directory, info, redrive_timeout),
                         base_cost=base_cost, label=info.cid)
            info.keys.update(cl.keys)
            refs.append(cl)
    for cl in list(shards.values()) + refs:
        cl.start()
    return ShardedSystem(sim, net, directory, refs, shards, [], genesis)


# -- one cross-shard trace ------------------------------------------------------------


@dataclass
class XShardOutcome:
    seed: int
    num_shards: int
    theta: float
    stalling: bool
    lying: dict
    begun: int
    committed: int
    aborted: int
    atomicity: object
    safety: list
    history: object
    balance_before: int
    balance_after: int
    unfinished_clients: int
    trace_digest: str
    metrics: dict

    @property
    def conserved(self) -> bool:
        return self.balance_before == self.balance_after

    @property
    def ok(self) -> bool:
        return self.atomicity.ok and not self.safety and self.conserved and self.unfinished_clients == 0


def total_balance(states: dict, accounts: Sequence[str]) -> int:
    total = 0
    for s, st in states.items():
        for acc in accounts:
            raw = st.kv.get(acc.encode())
            if raw is not None:
                total += decode_int(raw)
    return total


def run_xshard_trace(seed: int, num_shards: int, workload_factory: Callable[[str, random.Random], Iterator[Transaction]],
                     balances: dict, *, theta: float = 0.0, clients: int = 4, txs_per_client: int = 6,
                     stalling: Sequence[int] = (), stall_after: int = 0, lying: Optional[dict] = None,
                     equivocating: Sequence[int] = (), variant=Variant.AHLPlus, f: int = 1,
                     delay: Optional[DelayModel] = None, duration: float = 600.0, trace_keep=None,
                     redrive_timeout: float = 2.0) -> XShardOutcome:
    """Closed-loop clients against ``num_shards`` tx-committees and one reference committee.

    Clients listed in ``stalling`` stop relaying after ``stall_after`` steps.
    The run ends when every client is done and the coordinator has nothing
    left to re-drive (or at ``duration``).  The history recorder watches one
    honest replica per shard and the coordinator's decisions.
    """
    from ..bench.serializability import HistoryRecorder

    sim = Simulator(seed, trace_keep)
    client_ids = ["client%d" % i for i in range(clients)]
    behaviors = {client_ids[i]: StallingClient(stall_after) for i in stalling}
    lying = lying or {}
    byz = {m for ms in lying.values() for m in ms} | set(equivocating)
    adversary = AdversarySpec(frozenset(byz), behaviors)
    net = Network(sim, delay or Uniform(0.001, 0.01), adversary)
    system = build_sharded_system(sim, net, num_shards, balances, variant=variant, f=f, lying=lying,
                                  equivocating=equivocating, seed=seed, redrive_timeout=redrive_timeout)
    adversary.validate(nodes=[m for cl in list(system.shards.values()) + system.refs for m in cl.members],
                       clients=client_ids, committees=[cl.members for cl in system.shards.values()], f=f)
    recorder = HistoryRecorder(num_shards)
    recorder.attach(system)
    for cid in client_ids:
        rng = sim.fork_rng("workload|" + cid)
        system.clients.append(XClient(sim, net, cid, system.directory, workload_factory(cid, rng),
                                      max_tx=txs_per_client))
    accounts = sorted(balances)
    before = total_balance({s: g for s, g in system.genesis.items()}, accounts)
    sim.run(until=duration, stop_when=system.quiet)
    # let in-flight finalizations land at every replica
    sim.run(until=min(duration, sim.now + 5.0))
    states = system.honest_states()
    records = {k: v for k, v in system.records().items() if v is not None}
    missing = [k for k, v in system.records().items() if v is None]
    report = check_atomicity(records, states)
    report.unterminated += [(txid, "never begun at R") for txid in missing]
    after_states = {s: sts[0] for s, sts in states.items()}
    after = total_balance(after_states, accounts)
    safety = []
    for cl in list(system.shards.values()) + system.refs:
        safety += safety_violations(cl.honest())
    m = sim.metrics
    return XShardOutcome(seed, num_shards, theta, bool(stalling), {k: list(v) for k, v in lying.items()},
                         len(records) + len(missing), m.committed, m.aborted, report, safety, recorder.history(),
                         before, after, sum(1 for c in system.clients if not c.finished), sim.trace.digest,
                         m.summary())
