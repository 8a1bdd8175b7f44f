"""Network fabric, replica hosts and clients running on the event loop."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Optional, Sequence

from ..consensus import (
    Replica,
    Reply,
    Request,
    QueueFull,
    Variant,
    classify,
)
from ..enclave import AppendProof, verify_signature
from ..ledger import Transaction
from .adversary import AdversarySpec, Crash, DelayMax, Drop, StaleSealOnRestart
from .engine import Simulator
from .network import DelayModel, Fixed


@dataclass(frozen=True)
class ClientSubmit:
    tx: Transaction
    client: Any


def _proofs_in(msg) -> list[AppendProof]:
    """AppendProofs carried at the top level of a consensus message."""
    out = []
    p = getattr(msg, "proof", None)
    if isinstance(p, AppendProof):
        out.append(p)
    return out


class Network:
    """Delivers messages between registered actors.

    Honest links may lose messages (``loss``); the sender retransmits after
    ``rto`` with exponential backoff, which shows up as extra delay.
    Byzantine senders may drop or delay their own traffic per the adversary
    spec.  Every top-level AppendProof that crosses the wire is checked
    against a registry of slots, so two valid proofs for one slot with
    different digests are caught wherever they appear.
    """

    def __init__(self, sim: Simulator, delay: Optional[DelayModel] = None, adversary: Optional[AdversarySpec] = None,
                 loss: float = 0.0, rto: float = 0.2, max_backoff: int = 6, trace_messages: bool = True,
                 keys: Optional[dict] = None):
        self.sim = sim
        self.delay = delay or Fixed(0.001)
        self.adversary = adversary or AdversarySpec()
        self.loss = loss
        self.rto = rto
        self.max_backoff = max_backoff
        self.trace_messages = trace_messages
        self.actors: dict = {}
        self.rng = sim.fork_rng("network")
        self.adv_rng = sim.fork_rng("adversary")
        self.keys = keys if keys is not None else {}
        self.proof_slots: dict = {}
        self.equivocations: list = []

    def register(self, actor_id, actor) -> None:
        self.actors[actor_id] = actor

    def _check_proofs(self, msg) -> None:
        for p in _proofs_in(msg):
            pub = self.keys.get(p.node_id)
            if pub is None or not verify_signature(pub, p.body(), p.signature):
                continue
            slot = p.slot()
            seen = self.proof_slots.setdefault(slot, p.digest)
            if seen != p.digest:
                self.equivocations.append((slot, seen, p.digest))
                self.sim.record(p.node_id, "valid_equivocation", {"slot": list(map(str, slot))})

    def send(self, src, dst, msg, depart: Optional[float] = None) -> None:
        sim = self.sim
        depart = sim.now if depart is None else depart
        spec = self.adversary
        byz = src in spec.byzantine
        if byz:
            drop = spec.has(src, Drop)
            if drop is not None and self.adv_rng.random() < drop.p:
                sim.metrics.dropped += 1
                return
        d = self.delay.delay(src, dst, self.rng) if src != dst else 0.0
        if byz:
            dm = spec.has(src, DelayMax)
            if dm is not None:
                d = (self.delay.bound if self.delay.bound != float("inf") else d) + dm.extra
        elif self.loss and src != dst:
            k = 0
            while self.rng.random() < self.loss:
                d += self.rto * (2 ** min(k, self.max_backoff))
                k += 1
        sim.metrics.messages += 1
        if self.keys:
            self._check_proofs(msg)
        if self.trace_messages:
            sim.record(src, "send", {"to": dst, "type": type(msg).__name__, "seq": getattr(msg, "seq", None),
                                                "view": getattr(msg, "view", getattr(msg, "new_view", None))})
        target = self.actors.get(dst)
        if target is None:
            return
        sim.schedule(depart + d, dst, target.deliver, msg, src)


class ReplicaHost:
    """Runs one replica: CPU time, bounded inbound queues, timers, crash/restart.

    Handling a message costs ``base_cost`` plus whatever the signer's meter
    accumulated (Table-2 style enclave and signature costs); outputs leave
    when that work completes.  AHLPlus gets separate request and consensus
    queues; the other variants share one queue.
    """

    def __init__(self, sim: Simulator, net: Network, replica: Replica, base_cost: float = 20e-6,
                 app=None, split_queues: Optional[bool] = None, capacity: Optional[int] = None):
        self.sim = sim
        self.net = net
        self.replica = replica
        self.node_id = replica.node_id
        self.base_cost = base_cost
        self.app = app
        split = replica.variant is Variant.AHLPlus if split_queues is None else split_queues
        self.split = split
        self.capacity = capacity or replica.config.queue_capacity
        self.cq: deque = deque()
        self.rq: deque = self.cq if not split else deque()
        self.timer_q: deque = deque()
        self.busy_until = 0.0
        self.scheduled = False
        self.crashed = False
        self.byzantine = self.node_id in net.adversary.byzantine
        self._timer_marks: dict = {}
        self.sealed = None
        self.crash_height = None
        self.restarted_at = None
        self.genesis = replica.state
        self.executed_txids: set = set()
        self.executed_log: list = []  # (time, seq, digest)
        self.on_execute: list[Callable] = []
        net.register(self.node_id, self)
        self._install_behaviors()

    # -- adversary hooks --

    def _install_behaviors(self):
        spec = self.net.adversary
        crash = spec.has(self.node_id, Crash)
        if crash is not None:
            self.sim.schedule(crash.at, self.node_id, self.crash)
        stale = spec.has(self.node_id, StaleSealOnRestart)
        if stale is not None:
            self.sim.schedule(stale.seal_at, self.node_id, self._take_seal)
            self.sim.schedule(stale.crash_at, self.node_id, self.crash)
            self.sim.schedule(stale.restart_at, self.node_id, self.restart_with_seal)

    def _take_seal(self):
        if not self.crashed:
            self.sealed = self.replica.signer.seal()
            self.sim.record(self.node_id, "seal", {"ckp": self.replica.signer.last_stable_ckp,
                                                   "last_exec": self.replica.last_exec})

    def processed_height(self) -> int:
        enc = self.replica.signer
        high = max((s for log in enc.logs.values() for (_, s) in log), default=0)
        return max(high, self.replica.last_exec)

    def crash(self):
        if self.crashed:
            return
        self.crash_height = self.processed_height()
        self.crashed = True
        self.cq.clear()
        self.rq.clear()
        self.timer_q.clear()
        self.sim.record(self.node_id, "crash", {"H": self.crash_height})

    def restart_with_seal(self, factory: Optional[Callable[[], Replica]] = None):
        """Relaunch with fresh volatile state and feed the enclave the (possibly stale) seal."""
        old = self.replica
        enc = old.signer
        enc.restart(self.sim.now)
        if factory is not None:
            rep = factory()
        else:
            rep = type(old)(old.node_id, old.config, old.roster, enc, old.keys, self.genesis, old.validator)
        rep.now = self.sim.now
        self.replica = rep
        self.crashed = False
        self.restarted_at = self.sim.now
        self._timer_marks = {}
        self.sim.record(self.node_id, "restart", {"H": self.crash_height})
        sealed = self.sealed if self.sealed is not None else enc.seal()
        self._emit(rep.begin_recovery(sealed), self.sim.now)
        self._drain_replica()
        self._sync_timers()

    # -- inbound --

    def deliver(self, msg, src):
        if self.crashed:
            return
        if self.net.trace_messages:
            self.sim.record(self.node_id, "recv", {"from": src, "type": type(msg).__name__})
        if isinstance(msg, ClientSubmit):
            q = self.rq
            item = ("client", msg.tx, src)
        elif self.app is not None and self.app.handles(msg):
            q = self.cq
            item = ("app", msg, src)
        else:
            q = self.rq if classify(msg) == "request" else self.cq
            item = ("msg", msg, src)
        if src != self.node_id and len(q) >= self.capacity:
            self.sim.metrics.queue_drops += 1
            self.sim.metrics.dropped += 1
            self.sim.record(self.node_id, "queue_drop", {"type": type(msg).__name__})
            return
        q.append(item)
        self._kick()

    def submit(self, tx: Transaction, client=None):
        """Local submission (used by apps for transactions they originate)."""
        self.rq.append(("client", tx, client))
        self._kick()

    def _kick(self):
        if self.scheduled or self.crashed:
            return
        self.scheduled = True
        self.sim.schedule(max(self.sim.now, self.busy_until), self.node_id, self._process)

    def _next_item(self):
        if self.timer_q:
            return self.timer_q.popleft()
        if self.cq:
            return self.cq.popleft()
        if self.split and self.rq:
            return self.rq.popleft()
        return None

    def _process(self):
        self.scheduled = False
        if self.crashed:
            return
        item = self._next_item()
        if item is None:
            return
        rep = self.replica
        rep.now = self.sim.now
        out: list = []
        kind = item[0]
        if kind == "client":
            try:
                out = rep.on_client_request(item[1])
            except QueueFull:
                self.sim.metrics.dropped += 1
                self.sim.metrics.queue_drops += 1
        elif kind == "msg":
            o, executed = rep.on_message(item[1], item[2])
            out = o
        elif kind == "timer":
            name, deadline = item[1], item[2]
            if name.startswith("app:"):
                if self.app is not None and self.app.timers.get(name[4:]) == deadline:
                    self.app.timers.pop(name[4:], None)
                    out = self.app.on_timer(self, name[4:])
            elif rep.timers.get(name) == deadline:
                out = rep.on_timeout(name)
        elif kind == "app":
            out = self.app.on_message(self, item[1], item[2])
        cost = self.base_cost + rep.signer.meter.drain()
        done = self.sim.now + cost
        self.busy_until = done
        out = list(out)
        out += self._drain_replica()
        self._emit(out, done)
        self._sync_timers()
        if self.timer_q or self.cq or self.rq:
            self._kick()

    def _drain_replica(self) -> list:
        rep = self.replica
        out: list = []
        for event, payload in rep.trace:
            if event in ("execute", "view_change", "new_view", "enter_view", "recovery_estimate",
                         "recovery_complete", "recovery_begin", "equivocation", "conflicting_preprepare",
                         "invalid_proof", "invalid_view_change", "stable", "adopt_state", "enclave_refused",
                         "digest_mismatch") or self.net.trace_messages:
                self.sim.record(self.node_id, event, payload)
            if event == "view_change":
                self.sim.metrics.view_changes += 1
            elif event in ("invalid_proof", "invalid_view_change"):
                self.sim.metrics.invalid_proofs += 1
        rep.trace.clear()
        for block, receipts in rep.receipts_out:
            self.executed_log.append((self.sim.now, block.height, block.digest))
            self.executed_txids.update(r.txid for r in receipts)
            for cb in self.on_execute:
                cb(self, block, receipts)
            if self.app is not None:
                out += self.app.on_executed(self, block, receipts)
        rep.receipts_out.clear()
        return out

    def _emit(self, out, depart: float):
        for dst, msg in out:
            if dst == self.node_id:
                # loopback skips the wire but still waits for the CPU
                self.sim.schedule(depart, self.node_id, self.deliver, msg, self.node_id)
            else:
                self.net.send(self.node_id, dst, msg, depart)

    def _sync_timers(self):
        marks = {}
        for name, deadline in self.replica.timers.items():
            marks[name] = deadline
        if self.app is not None:
            for name, deadline in self.app.timers.items():
                marks["app:" + name] = deadline
        for name, deadline in marks.items():
            if self._timer_marks.get(name) != deadline:
                self.sim.schedule(deadline, self.node_id, self._fire, name, deadline)
        self._timer_marks = marks

    def _fire(self, name, deadline):
        if self.crashed:
            return
        self.timer_q.append(("timer", name, deadline))
        self._kick()


class Client:
    """Workload client: submits transactions to an entry replica and waits for f+1 matching replies.

    ``mode`` is ``"open"`` (fixed issue ``rate`` with at most ``outstanding_cap``
    in flight) or ``"closed"`` (one at a time).  A transaction unanswered
    after ``retry`` seconds is re-sent to every member.
    """

    def __init__(self, sim: Simulator, net: Network, client_id: str, members: Sequence[int], reply_quorum: int,
                 workload: Iterator[Transaction], mode: str = "closed", rate: float = 100.0,
                 outstanding_cap: int = 128, retry: float = 2.0, entry: Optional[int] = None,
                 stop_at: Optional[float] = None, start_at: float = 0.0, max_tx: Optional[int] = None,
                 directory: Optional[Callable[[], Sequence]] = None):
        self.sim, self.net = sim, net
        self.client_id = client_id
        self.members = list(members)
        self.reply_quorum = reply_quorum
        self.workload = workload
        self.mode = mode
        self.rate = rate
        self.cap = outstanding_cap
        self.retry = retry
        self.entry = entry if entry is not None else self.members[hash_index(client_id, len(self.members))]
        self.stop_at = stop_at
        self.max_tx = max_tx
        self.directory = directory
        self.outstanding: dict[str, tuple[Transaction, float]] = {}
        self.votes: dict[str, dict[str, set]] = {}
        self.done: dict[str, str] = {}
        self.issued = 0
        self.exhausted = False
        net.register(client_id, self)
        sim.schedule(start_at, client_id, self._tick)
        sim.schedule(start_at + retry, client_id, self._retry_check)

    def _can_issue(self) -> bool:
        if self.exhausted or (self.stop_at is not None and self.sim.now >= self.stop_at):
            return False
        if self.max_tx is not None and self.issued >= self.max_tx:
            return False
        return len(self.outstanding) < (1 if self.mode == "closed" else self.cap)

    def _issue(self):
        try:
            tx = next(self.workload)
        except StopIteration:
            self.exhausted = True
            return
        self.issued += 1
        self.sim.metrics.issued += 1
        self.outstanding[tx.txid] = (tx, self.sim.now)
        self.net.send(self.client_id, self._entry(), ClientSubmit(tx, self.client_id))

    def _entry(self):
        if self.directory is None:
            return self.entry
        live = list(self.directory())
        return live[hash_index(self.client_id, len(live))] if live else self.entry

    def _targets(self) -> list:
        return list(self.directory()) if self.directory is not None else self.members

    def _tick(self):
        if self.mode == "open":
            if self._can_issue():
                self._issue()
            if not self.exhausted and (self.stop_at is None or self.sim.now < self.stop_at) and \
                    (self.max_tx is None or self.issued < self.max_tx):
                self.sim.after(1.0 / self.rate, self.client_id, self._tick)
        elif self._can_issue():
            self._issue()

    def _retry_check(self):
        now = self.sim.now
        for txid, (tx, t0) in list(self.outstanding.items()):
            if now - t0 >= self.retry:
                for m in self._targets():
                    self.net.send(self.client_id, m, ClientSubmit(tx, self.client_id))
        if self.outstanding or not self.exhausted:
            if self.stop_at is None or now < self.stop_at + 60 or self.outstanding:
                self.sim.after(self.retry, self.client_id, self._retry_check)

    def deliver(self, msg, src):
        if not isinstance(msg, Reply):
            return
        for txid, status in msg.results:
            if txid not in self.outstanding:
                continue
            voters = self.votes.setdefault(txid, {}).setdefault(status, set())
            voters.add(src)
            if len(voters) >= self.reply_quorum:
                tx, t0 = self.outstanding.pop(txid)
                self.votes.pop(txid, None)
                self.done[txid] = status
                m = self.sim.metrics
                if status == "Committed":
                    m.committed += 1
                else:
                    m.aborted += 1
                m.latencies.append(self.sim.now - t0)
                m.commit_times.append(self.sim.now)
                if self.mode == "closed":
                    self.sim.after(0.0, self.client_id, self._tick)


def hash_index(name: str, n: int) -> int:
    import hashlib

    return int.from_bytes(hashlib.sha256(str(name).encode()).digest()[:4], "big") % n
