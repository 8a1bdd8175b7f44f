"""Isolation oracle: conflict graph over committed transactions, plus a brute-force cross-check.

A history is a list of operations in execution order; every operation
belongs to a transaction and touches keys (reads and writes).  Each
committed transaction has a commit point.  The history is accepted when
there is a serial order that

* orders every pair of conflicting operations (same key, at least one
  write, different transactions) the way the history did, and
* agrees with the commit order for every pair of conflicting transactions.

The second condition is what rejects histories where a transaction acts on
another one's partial effects and finishes first: the writer's later steps
would have to precede the reader in any equivalent serial run, which the
reader's earlier commit rules out.  Strict two-phase locking produces only
accepted histories.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Iterable, Optional


class MalformedTrace(ValueError):
    pass


@dataclass(frozen=True)
class Op:
    txid: str
    reads: frozenset = frozenset()
    writes: frozenset = frozenset()
    shard: int = 0
    label: str = ""

    def conflicts(self, other: "Op") -> bool:
        if self.txid == other.txid:
            return False
        return bool(self.writes & (other.reads | other.writes) or other.writes & self.reads)


@dataclass
class History:
    ops: list = field(default_factory=list)
    commits: dict = field(default_factory=dict)  # txid -> position in the global commit order

    def committed(self) -> "History":
        return History([o for o in self.ops if o.txid in self.commits], dict(self.commits))

    def txids(self) -> list[str]:
        seen: dict[str, None] = {}
        for o in self.ops:
            seen.setdefault(o.txid, None)
        return list(seen)

    def validate(self) -> None:
        ids = set(self.txids())
        extra = set(self.commits) - ids
        if extra:
            raise MalformedTrace(f"commit without operations: {sorted(extra)[:3]}")

    def to_json(self) -> dict:
        return {"ops": [{"txid": o.txid, "reads": sorted(k.hex() for k in o.reads),
                         "writes": sorted(k.hex() for k in o.writes), "shard": o.shard, "label": o.label}
                        for o in self.ops],
                "commits": {t: list(p) if isinstance(p, tuple) else p for t, p in self.commits.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "History":
        try:
            ops = [Op(o["txid"], frozenset(bytes.fromhex(k) for k in o["reads"]),
                      frozenset(bytes.fromhex(k) for k in o["writes"]), int(o.get("shard", 0)), o.get("label", ""))
                   for o in d["ops"]]
            commits = {t: tuple(p) if isinstance(p, list) else p for t, p in d["commits"].items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedTrace(str(exc)) from exc
        h = cls(ops, commits)
        h.validate()
        return h


@dataclass
class SerializabilityVerdict:
    serializable: bool
    order: Optional[list] = None
    cycle: Optional[list] = None


def _constraints(h: History) -> set[tuple[str, str]]:
    """Edges a -> b meaning a must precede b in any acceptable serial order."""
    edges: set[tuple[str, str]] = set()
    by_key: dict[bytes, list[Op]] = {}
    for o in h.ops:
        for k in o.reads | o.writes:
            by_key.setdefault(k, []).append(o)
    # only ops sharing a key can conflict; scanning per key keeps big runs tractable
    for k, ops in by_key.items():
        for i, a in enumerate(ops):
            for b in ops[i + 1:]:
                if a.txid != b.txid and (k in a.writes or k in b.writes):
                    edges.add((a.txid, b.txid))
    for a, b in list(edges):
        ca, cb = h.commits[a], h.commits[b]
        if cb < ca:
            edges.add((b, a))
        elif ca < cb:
            edges.add((a, b))
    return edges


def check_serializability(history: History) -> SerializabilityVerdict:
    """Serializable with a witness order, or a violation with a witness cycle."""
    history.validate()
    h = history.committed()
    txs = sorted(h.txids(), key=lambda t: h.commits[t])
    ts: TopologicalSorter = TopologicalSorter()
    for t in txs:
        ts.add(t)
    for a, b in sorted(_constraints(h)):
        ts.add(b, a)
    try:
        order = list(ts.static_order())
    except CycleError as exc:
        cycle = list(exc.args[1])
        return SerializabilityVerdict(False, None, cycle)
    return SerializabilityVerdict(True, order, None)


def brute_force_serializable(history: History) -> tuple[bool, Optional[list]]:
    """Try every serial order of the committed transactions (small histories only)."""
    history.validate()
    h = history.committed()
    txs = h.txids()
    if len(txs) > 8:
        raise ValueError("brute force limited to 8 transactions")
    pairs = []
    ops = h.ops
    for i, a in enumerate(ops):
        for b in ops[i + 1:]:
            if a.conflicts(b):
                pairs.append((a.txid, b.txid))
    for perm in itertools.permutations(txs):
        pos = {t: i for i, t in enumerate(perm)}
        if all(pos[a] < pos[b] for a, b in pairs) and \
                all((pos[a] < pos[b]) == (h.commits[a] < h.commits[b]) for a, b in pairs):
            return True, list(perm)
    return False, None


def sub_histories(history: History, size: int, limit: int = 50, rng=None) -> list[History]:
    """Projections of the committed history onto (up to ``limit``) sets of ``size`` transactions."""
    h = history.committed()
    txs = h.txids()
    if len(txs) <= size:
        return [h]
    combos = list(itertools.combinations(txs, size)) if len(txs) <= 14 else None
    picks = []
    if combos is not None and len(combos) <= limit:
        picks = combos
    else:
        import random

        rng = rng or random.Random(0)
        for _ in range(limit):
            picks.append(tuple(rng.sample(txs, size)))
    out = []
    for group in picks:
        keep = set(group)
        out.append(History([o for o in h.ops if o.txid in keep], {t: h.commits[t] for t in group}))
    return out


def split_payment_history() -> History:
    """The split-payment interleaving: tx1 moves acc1+acc3 to acc2, tx2 moves acc3 to acc4.

    tx1 runs as three independent steps (debit acc1 on shard 1, debit acc3
    on shard 2, credit acc2 on shard 1); tx2's steps run between tx1's
    second and third, and tx2 finishes before tx1 does.
    """
    a1, a2, a3, a4 = b"acc1", b"acc2", b"acc3", b"acc4"
    ops = [
        Op("tx1", frozenset({a1}), frozenset({a1}), 1, "op1a"),
        Op("tx1", frozenset({a3}), frozenset({a3}), 2, "op1b"),
        Op("tx2", frozenset({a3}), frozenset({a3}), 2, "op2a"),
        Op("tx2", frozenset({a4}), frozenset({a4}), 2, "op2b"),
        Op("tx1", frozenset({a2}), frozenset({a2}), 1, "op1c"),
    ]
    return History(ops, {"tx2": 4, "tx1": 5})


class HistoryRecorder:
    """Builds the committed history of a sharded run from replica execution callbacks.

    Every honest replica of every shard reports; an operation's position is
    the first time any of them executed it.  A cross-shard transaction's
    read happens at its prepare, its write at its commit, and its commit
    point is the first time a coordinator replica logged the decision.
    """

    def __init__(self, num_shards: int):
        self.num_shards = num_shards
        self.counter = 0
        self.first_seen: dict[tuple, tuple] = {}  # (shard, seq, idx) -> pos
        self.ops: dict[tuple, Op] = {}
        self.commits: dict[str, tuple] = {}
        self.prepared: dict[tuple, Op] = {}

    def _pos(self, now: float) -> tuple:
        self.counter += 1
        return (round(now, 9), self.counter)

    def attach(self, system) -> None:
        for s, cl in system.shards.items():
            for h in cl.honest():
                h.on_execute.append(lambda host, block, receipts, s=s: self._on_shard(host, s, block, receipts))
        for cl in system.refs:
            for h in cl.honest():
                h.on_execute.append(self._on_ref)

    def _on_ref(self, host, block, receipts) -> None:
        from ..coordination import RefState

        for r in receipts:
            rec = r.result
            if rec is None or not hasattr(rec, "state") or r.error:
                continue
            if rec.state is RefState.COMMITTED and rec.txid not in self.commits:
                self.commits[rec.txid] = self._pos(host.sim.now)

    def _on_shard(self, host, shard: int, block, receipts) -> None:
        from ..ledger import CommitPhaseOp, KvUpdate, PreparePhaseOp, ReceiptStatus, SmallBankPayment

        by_id = {t.txid: (i, t) for i, t in enumerate(block.txs)}
        for r in receipts:
            i, tx = by_id[r.txid]
            key = (shard, block.height, i)
            if key in self.first_seen:
                continue
            pos = self._pos(host.sim.now)
            self.first_seen[key] = pos
            p = tx.payload
            if isinstance(p, PreparePhaseOp) and r.status is ReceiptStatus.PREPARE_OK:
                reads = frozenset(k for k, _ in p.subop.deltas) | frozenset(k for k, _ in r.reads)
                self.ops[key] = Op(p.txid, reads, frozenset(), shard, "prepare")
            elif isinstance(p, CommitPhaseOp) and r.status is ReceiptStatus.COMMITTED and not r.error:
                self.ops[key] = Op(p.txid, frozenset(), frozenset(k for k, _ in r.writes), shard, "commit")
            elif isinstance(p, (KvUpdate, SmallBankPayment)) and r.status is ReceiptStatus.COMMITTED:
                self.ops[key] = Op(tx.txid, frozenset(k for k, _ in r.reads), frozenset(k for k, _ in r.writes),
                                   shard, "single")
                self.commits[tx.txid] = pos

    def history(self) -> History:
        keys = sorted(self.ops, key=lambda k: self.first_seen[k])
        ops = [self.ops[k] for k in keys]
        ids = {o.txid for o in ops}
        return History(ops, {t: p for t, p in self.commits.items() if t in ids})


def history_from_jsonl(lines: Iterable[str]) -> History:
    for line in lines:
        line = line.strip()
        if line:
            return History.from_json(json.loads(line))
    raise MalformedTrace("empty history")
