"""Cross-shard transactions: 2PC coordinated by a BFT reference committee, 2PL at the shards.

The coordinator state machine runs as ledger operations (``RefCommitteeOp``)
inside the reference committee's own consensus instance, so its records live
in that committee's replicated state.  Tx-committees execute the prepare /
commit / abort split of each transaction under no-wait locking.  Every hop
between committees carries a quorum of signed messages as evidence.

Two drivers share the same messages and state machine: an in-process one
(:class:`ReferenceCommittee`, :class:`TxCommittee`, :func:`client_relay`)
where each committee is an agreed log, and the simulated one
(:class:`RefMemberApp`, :class:`TxMemberApp`) that runs on replica hosts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Optional, Sequence

from .enclave import verify_signature
from .ledger import (
    AbortPhaseOp,
    CommitPhaseOp,
    KvUpdate,
    LedgerError,
    LedgerState,
    PreparePhaseOp,
    Receipt,
    ReceiptStatus,
    RefCommitteeOp,
    SmallBankPayment,
    SubOp,
    Transaction,
    _b64,
    _unb64,
    execute_transaction,
    share_on_copy,
    shard_of,
)


class CoordinationError(Exception):
    pass


class DuplicateTx(CoordinationError):
    pass


class InvalidQuorum(CoordinationError):
    pass


class StaleQuorum(CoordinationError):
    pass


class InsufficientEvidence(CoordinationError):
    pass


class RefState(str, Enum):
    STARTED = "Started"
    PREPARING = "Preparing"
    COMMITTED = "Committed"
    ABORTED = "Aborted"

    @property
    def terminal(self) -> bool:
        return self in (RefState.COMMITTED, RefState.ABORTED)


class Verdict(str, Enum):
    OK = "PrepareOK"
    NOT_OK = "PrepareNotOK"


class DecisionKind(str, Enum):
    COMMIT = "CommitTx"
    ABORT = "AbortTx"


# -- records and split ----------------------------------------------------------


@dataclass(frozen=True)
class RefTxRecord:
    txid: str
    state: RefState
    c: int
    involved: frozenset
    counted: frozenset = frozenset()
    client: str = ""

    def to_json(self) -> dict:
        return {"txid": self.txid, "state": self.state.value, "c": self.c, "involved": sorted(self.involved),
                "counted": sorted(self.counted), "client": self.client}

    @classmethod
    def from_json(cls, d: Mapping) -> "RefTxRecord":
        return cls(d["txid"], RefState(d["state"]), int(d["c"]), frozenset(d["involved"]),
                   frozenset(d["counted"]), d.get("client", ""))


@dataclass(frozen=True)
class CrossShardTx:
    txid: str
    payload: Any
    subops: Mapping[int, PreparePhaseOp]
    client: str = ""

    @property
    def involved(self) -> frozenset:
        return frozenset(self.subops)


def split_transaction(tx: Transaction, num_shards: int) -> CrossShardTx:
    """Partition a KvUpdate or SmallBankPayment by key ownership into per-shard prepare ops."""
    p = tx.payload
    writes: dict[int, list] = {}
    deltas: dict[int, list] = {}
    if isinstance(p, KvUpdate):
        for k, v in p.writes:
            writes.setdefault(shard_of(k, num_shards), []).append((k, v))
    elif isinstance(p, SmallBankPayment):
        if p.src == p.dst:
            deltas.setdefault(shard_of(p.src, num_shards), []).append((p.src, 0))
        else:
            deltas.setdefault(shard_of(p.src, num_shards), []).append((p.src, -p.amount))
            deltas.setdefault(shard_of(p.dst, num_shards), []).append((p.dst, p.amount))
    else:
        raise CoordinationError(f"cannot split {type(p).__name__}")
    shards = sorted(set(writes) | set(deltas))
    subops = {s: PreparePhaseOp(tx.txid, SubOp(tuple(writes.get(s, ())), tuple(deltas.get(s, ()))))
              for s in shards}
    return CrossShardTx(tx.txid, p, subops, tx.client)


def _subop_json(op: SubOp) -> dict:
    return {"writes": [[_b64(k), _b64(v)] for k, v in op.writes], "deltas": [[_b64(k), d] for k, d in op.deltas]}


def _subop_from_json(d: Mapping) -> SubOp:
    return SubOp(tuple((_unb64(k), _unb64(v)) for k, v in d["writes"]),
                 tuple((_unb64(k), int(x)) for k, x in d["deltas"]))


# -- reference committee operations ---------------------------------------------


@dataclass(frozen=True)
class BeginOp:
    txid: str
    subops: tuple  # ((shard, SubOp), ...) sorted by shard
    client: str = ""

    @property
    def involved(self) -> frozenset:
        return frozenset(s for s, _ in self.subops)

    def to_json(self) -> dict:
        return {"kind": "begin", "txid": self.txid, "client": self.client,
                "subops": [[s, _subop_json(op)] for s, op in self.subops]}


@dataclass(frozen=True)
class VoteOp:
    txid: str
    committee: int
    verdict: Verdict

    def to_json(self) -> dict:
        return {"kind": "vote", "txid": self.txid, "committee": self.committee, "verdict": self.verdict.value}


def begin_op(cross: CrossShardTx) -> BeginOp:
    return BeginOp(cross.txid, tuple((s, cross.subops[s].subop) for s in sorted(cross.subops)), cross.client)


def ref_op_from_json(d: Mapping):
    if d.get("kind") == "begin":
        return BeginOp(d["txid"], tuple((int(s), _subop_from_json(op)) for s, op in d["subops"]), d.get("client", ""))
    if d.get("kind") == "vote":
        return VoteOp(d["txid"], int(d["committee"]), Verdict(d["verdict"]))
    raise CoordinationError(f"unknown reference op {d!r}")


def record_key(txid: str) -> bytes:
    return b"ref:" + txid.encode()


def subops_key(txid: str) -> bytes:
    return b"refsub:" + txid.encode()


def load_record(kv: Mapping, txid: str) -> Optional[RefTxRecord]:
    raw = kv.get(record_key(txid))
    return None if raw is None else RefTxRecord.from_json(json.loads(raw))


def load_subops(kv: Mapping, txid: str) -> dict[int, SubOp]:
    raw = kv.get(subops_key(txid))
    if raw is None:
        return {}
    return {int(s): _subop_from_json(op) for s, op in json.loads(raw)}


def _store(kv: dict, rec: RefTxRecord) -> None:
    kv[record_key(rec.txid)] = json.dumps(rec.to_json(), sort_keys=True).encode()


def rc_step(record: RefTxRecord, quorum: "VoteQuorum", keys: Optional[Mapping] = None,
            quorum_size: Optional[int] = None) -> RefTxRecord:
    """Apply one tx-committee verdict to the coordinator record.

    With ``keys`` and ``quorum_size`` the quorum's signatures are checked
    too; inside the committee's ledger that check already happened when the
    op was admitted.
    """
    if quorum.txid != record.txid:
        raise InvalidQuorum("quorum for another transaction")
    if keys is not None and not quorum.verify(keys, quorum_size or 1):
        raise InvalidQuorum("quorum does not verify")
    if record.state.terminal:
        raise StaleQuorum(record.state.value)
    if quorum.committee not in record.involved:
        raise InvalidQuorum(f"committee {quorum.committee} not involved")
    if quorum.committee in record.counted:
        raise StaleQuorum(f"committee {quorum.committee} already counted")
    counted = record.counted | {quorum.committee}
    if quorum.verdict is Verdict.NOT_OK:
        return replace(record, state=RefState.ABORTED, counted=counted)
    c = record.c - 1
    return replace(record, state=RefState.COMMITTED if c == 0 else RefState.PREPARING, c=c, counted=counted)


def apply_ref_op(kv: dict, op_txid: str, op) -> Receipt:
    """Execute one reference-committee input against its key-value state (called by the ledger)."""
    if isinstance(op, BeginOp):
        existing = load_record(kv, op.txid)
        if existing is not None:
            return Receipt(op_txid, ReceiptStatus.ABORTED, error="DuplicateTx", result=existing)
        involved = op.involved
        if len(involved) < 2 or len(involved) != len(op.subops):
            return Receipt(op_txid, ReceiptStatus.ABORTED, error="MalformedPayload")
        rec = RefTxRecord(op.txid, RefState.STARTED, len(involved), involved, frozenset(), op.client)
        _store(kv, rec)
        kv[subops_key(op.txid)] = json.dumps([[s, _subop_json(so)] for s, so in op.subops], sort_keys=True).encode()
        return Receipt(op_txid, ReceiptStatus.COMMITTED, result=rec)
    if isinstance(op, VoteOp):
        rec = load_record(kv, op.txid)
        if rec is None:
            return Receipt(op_txid, ReceiptStatus.ABORTED, error="UnknownTx")
        try:
            new = rc_step(rec, VoteQuorum(op.txid, op.committee, op.verdict, ()))
        except StaleQuorum:
            return Receipt(op_txid, ReceiptStatus.ABORTED, error="StaleQuorum", result=rec)
        except InvalidQuorum:
            return Receipt(op_txid, ReceiptStatus.ABORTED, error="InvalidQuorum", result=rec)
        _store(kv, new)
        return Receipt(op_txid, ReceiptStatus.COMMITTED, result=new)
    return Receipt(op_txid, ReceiptStatus.ABORTED, error="MalformedPayload")


# -- signed messages ---------------------------------------------------------------


def _canon(*parts) -> bytes:
    return json.dumps(parts, sort_keys=True, default=str).encode()


@dataclass(frozen=True)
class PrepareTx:
    txid: str
    committee: int
    subop: SubOp
    client: str
    sender: Any
    signature: bytes = b""

    def content(self) -> tuple:
        return ("PrepareTx", self.txid, self.committee, _subop_json(self.subop), self.client)


@dataclass(frozen=True)
class Vote:
    txid: str
    committee: int
    verdict: Verdict
    sender: Any
    signature: bytes = b""

    def content(self) -> tuple:
        return ("Vote", self.txid, self.committee, self.verdict.value)


@dataclass(frozen=True)
class Decision:
    txid: str
    decision: DecisionKind
    client: str
    sender: Any
    signature: bytes = b""

    def content(self) -> tuple:
        return ("Decision", self.txid, self.decision.value, self.client)


@dataclass(frozen=True)
class Ack:
    txid: str
    committee: int
    status: str
    sender: Any
    signature: bytes = b""

    def content(self) -> tuple:
        return ("Ack", self.txid, self.committee, self.status)


@dataclass(frozen=True)
class AckBundle:
    """Client-relayed finalization acks, so the coordinator can stop re-driving."""

    txid: str
    acks: tuple


SignedMsg = (PrepareTx, Vote, Decision, Ack)


def msg_body(msg) -> bytes:
    return _canon(msg.content(), str(msg.sender))


def sign(msg, signer):
    return replace(msg, signature=signer.sign_message(msg_body(msg)))


def verify_msg(msg, keys: Mapping) -> bool:
    pub = keys.get(msg.sender)
    return pub is not None and bool(msg.signature) and verify_signature(pub, b"msg|" + msg_body(msg), msg.signature)


def check_quorum(msgs: Iterable, keys: Mapping, size: int, content: Optional[tuple] = None) -> bool:
    """At least ``size`` distinct, member-signed messages with identical content."""
    senders = set()
    for m in msgs:
        if content is None:
            content = m.content()
        if m.content() != content or not verify_msg(m, keys):
            continue
        senders.add(m.sender)
    return len(senders) >= size


@dataclass(frozen=True)
class VoteQuorum:
    txid: str
    committee: int
    verdict: Verdict
    replies: tuple = ()

    def verify(self, keys: Mapping, size: int) -> bool:
        return check_quorum(self.replies, keys, size, ("Vote", self.txid, self.committee, self.verdict.value))


share_on_copy(RefTxRecord, CrossShardTx, BeginOp, VoteOp, PrepareTx, Vote, Decision, Ack, AckBundle, VoteQuorum)


# -- directory and validators ---------------------------------------------------------

REF = "R"


@dataclass
class CommitteeInfo:
    cid: Any
    members: tuple
    keys: dict
    quorum: int


@dataclass
class Directory:
    """Who is in which committee; committee ``"R"`` (or ``"R0"``, ``"R1"``...) coordinates."""

    shards: dict = field(default_factory=dict)  # shard id -> CommitteeInfo
    refs: list = field(default_factory=list)  # CommitteeInfo per reference instance
    num_shards: int = 1

    def ref_for(self, txid: str) -> CommitteeInfo:
        if len(self.refs) == 1:
            return self.refs[0]
        return self.refs[int.from_bytes(txid.encode()[-4:].rjust(4, b"\0"), "big") % len(self.refs)]


def prep_txid(txid: str, shard: int) -> str:
    return f"prep:{txid}"


def fin_txid(txid: str) -> str:
    return f"fin:{txid}"


def begin_txid(txid: str) -> str:
    return f"begin:{txid}"


def vote_txid(txid: str, shard: int) -> str:
    return f"vote:{txid}:{shard}"


def _decision_for(state: RefState) -> DecisionKind:
    return DecisionKind.COMMIT if state is RefState.COMMITTED else DecisionKind.ABORT


def ref_validator(directory: Directory, ref: CommitteeInfo):
    """Admission rule for the reference committee's consensus: votes need a tx-committee quorum."""

    def check(tx: Transaction) -> bool:
        p = tx.payload
        if not isinstance(p, RefCommitteeOp):
            return False
        op = p.op
        if isinstance(op, BeginOp):
            return directory.ref_for(op.txid) is ref and all(s in directory.shards for s, _ in op.subops)
        if isinstance(op, VoteOp):
            info = directory.shards.get(op.committee)
            if info is None:
                return False
            return check_quorum(tx.evidence, info.keys, info.quorum, ("Vote", op.txid, op.committee, op.verdict.value))
        return False

    return check


def shard_validator(directory: Directory, shard: int):
    """Admission rule for a tx-committee: phase ops need coordinator evidence, plain txs must be local."""

    def check(tx: Transaction) -> bool:
        p = tx.payload
        if isinstance(p, PreparePhaseOp):
            ref = directory.ref_for(p.txid)
            ev = tx.evidence
            if not ev or not isinstance(ev[0], PrepareTx):
                return False
            want = ("PrepareTx", p.txid, shard, _subop_json(p.subop), ev[0].client)
            return check_quorum(ev, ref.keys, ref.quorum, want)
        if isinstance(p, (CommitPhaseOp, AbortPhaseOp)):
            ref = directory.ref_for(p.txid)
            ev = tx.evidence
            if not ev or not isinstance(ev[0], Decision):
                return False
            kind = DecisionKind.COMMIT if isinstance(p, CommitPhaseOp) else DecisionKind.ABORT
            return check_quorum(ev, ref.keys, ref.quorum, ("Decision", p.txid, kind.value, ev[0].client))
        if isinstance(p, (KvUpdate, SmallBankPayment)):
            return all(shard_of(k, directory.num_shards) == shard for k in p.keys())
        return False

    return check


def phase_verdict(state: LedgerState, txid: str) -> Optional[Verdict]:
    phase = state.txlog.get("2pc:" + txid)
    if phase is None:
        return None
    return Verdict.OK if phase in ("prepared", "committed") else Verdict.NOT_OK


def finalized(state: LedgerState, txid: str) -> Optional[str]:
    """'committed' / 'aborted' once the decision was applied at this shard."""
    phase = state.txlog.get("2pc:" + txid)
    if phase in ("committed", "aborted"):
        return phase
    return None


# -- in-process committees -------------------------------------------------------------


class _Committee:
    """A committee whose consensus is taken as given: one agreed ledger, one signer per member.

    ``byzantine`` members sign whatever they are told to lie about (flipped
    verdicts); honest members sign the outcome of the agreed ledger.
    """

    def __init__(self, cid, signers: Sequence, quorum: int, state: Optional[LedgerState] = None,
                 byzantine: Iterable = ()):
        self.cid = cid
        self.signers = list(signers)
        self.keys = {s.node_id: s.public_key for s in self.signers}
        self.quorum = quorum
        self.state = state if state is not None else LedgerState()
        self.byzantine = set(byzantine)
        self.log: list[tuple[Transaction, Receipt]] = []

    @property
    def info(self) -> CommitteeInfo:
        return CommitteeInfo(self.cid, tuple(self.keys), self.keys, self.quorum)

    def execute(self, tx: Transaction) -> Receipt:
        if tx.txid in self.state.txlog:
            return next(r for t, r in reversed(self.log) if t.txid == tx.txid)
        try:
            self.state, receipt = execute_transaction(self.state, tx)
        except LedgerError as exc:
            self.state = LedgerState(self.state.kv, self.state.height, {**self.state.txlog, tx.txid: "A"})
            receipt = Receipt(tx.txid, ReceiptStatus.ABORTED, error=type(exc).__name__)
        self.log.append((tx, receipt))
        return receipt


class ReferenceCommittee(_Committee):
    def record(self, txid: str) -> Optional[RefTxRecord]:
        return load_record(self.state.kv, txid)

    def prepare_requests(self, txid: str, shard: int) -> list[PrepareTx]:
        rec = self.record(txid)
        if rec is None:
            return []
        subop = load_subops(self.state.kv, txid)[shard]
        return [sign(PrepareTx(txid, shard, subop, rec.client, s.node_id), s) for s in self.signers]

    def decisions(self, txid: str) -> list[Decision]:
        rec = self.record(txid)
        if rec is None or not rec.state.terminal:
            return []
        kind = _decision_for(rec.state)
        return [sign(Decision(txid, kind, rec.client, s.node_id), s) for s in self.signers]


class TxCommittee(_Committee):
    pass


def begin_tx(rc: ReferenceCommittee, cross: CrossShardTx) -> RefTxRecord:
    """Log the transaction at R (Started, c = number of involved shards)."""
    if len(cross.involved) < 2:
        raise CoordinationError("single-shard transactions bypass coordination")
    if rc.record(cross.txid) is not None:
        raise DuplicateTx(cross.txid)
    receipt = rc.execute(Transaction(begin_txid(cross.txid), RefCommitteeOp(begin_op(cross))))
    if receipt.error == "DuplicateTx":
        raise DuplicateTx(cross.txid)
    if receipt.status is not ReceiptStatus.COMMITTED:
        raise CoordinationError(receipt.error or "begin refused")
    return receipt.result


def shard_prepare(tc: TxCommittee, txid: str, subop: SubOp, evidence: Sequence[PrepareTx],
                  ref_keys: Mapping, ref_quorum: int) -> VoteQuorum:
    """Run the prepare op at a tx-committee once R's PrepareTx quorum checks out."""
    client = evidence[0].client if evidence else ""
    if not check_quorum(evidence, ref_keys, ref_quorum, ("PrepareTx", txid, tc.cid, _subop_json(subop), client)):
        raise InsufficientEvidence(f"PrepareTx quorum for {txid} at {tc.cid}")
    receipt = tc.execute(Transaction(prep_txid(txid, tc.cid), PreparePhaseOp(txid, subop), evidence=tuple(evidence)))
    verdict = Verdict.OK if receipt.status is ReceiptStatus.PREPARE_OK else Verdict.NOT_OK
    replies = []
    for s in tc.signers:
        v = verdict
        if s.node_id in tc.byzantine:
            v = Verdict.NOT_OK if verdict is Verdict.OK else Verdict.OK
        replies.append(sign(Vote(txid, tc.cid, v, s.node_id), s))
    honest = tuple(r for r in replies if r.verdict is verdict)
    return VoteQuorum(txid, tc.cid, verdict, honest)


def rc_apply(rc: ReferenceCommittee, quorum: VoteQuorum, shard_keys: Mapping, shard_quorum: int) -> RefTxRecord:
    """Run a verified vote quorum through R's ledger."""
    if not quorum.verify(shard_keys, shard_quorum):
        raise InvalidQuorum(f"vote quorum for {quorum.txid} from {quorum.committee}")
    op = VoteOp(quorum.txid, quorum.committee, quorum.verdict)
    receipt = rc.execute(Transaction(vote_txid(quorum.txid, quorum.committee), RefCommitteeOp(op),
                                     evidence=quorum.replies))
    if receipt.error == "StaleQuorum":
        raise StaleQuorum(quorum.txid)
    if receipt.error == "InvalidQuorum":
        raise InvalidQuorum(quorum.txid)
    return receipt.result if receipt.result is not None else rc.record(quorum.txid)


def shard_finalize(tc: TxCommittee, txid: str, evidence: Sequence[Decision], ref_keys: Mapping,
                   ref_quorum: int) -> Receipt:
    if not evidence:
        raise InsufficientEvidence(txid)
    first = evidence[0]
    if not check_quorum(evidence, ref_keys, ref_quorum, first.content()):
        raise InsufficientEvidence(f"decision quorum for {txid}")
    op = CommitPhaseOp(txid) if first.decision is DecisionKind.COMMIT else AbortPhaseOp(txid)
    tx = Transaction(fin_txid(txid) + (":c" if first.decision is DecisionKind.COMMIT else ":a"), op,
                     evidence=tuple(evidence))
    return tc.execute(tx)


@dataclass
class RelayOutcome:
    txid: str
    status: str
    redriven: bool
    steps: int


def client_relay(tx: Transaction, rc: ReferenceCommittee, shards: Mapping[int, TxCommittee], num_shards: int,
                 stall_after: Optional[int] = None) -> RelayOutcome:
    """Drive one transaction end to end; a stalling client stops after ``stall_after`` hops.

    When the client stops, R's members take over (the re-drive path), so the
    transaction still terminates.  Single-shard transactions go straight to
    their committee.
    """
    cross = split_transaction(tx, num_shards)
    if len(cross.involved) == 1:
        (s,) = cross.involved
        r = shards[s].execute(tx)
        return RelayOutcome(tx.txid, r.status.value, False, 1)
    steps = 0
    redriven = False

    def hop() -> bool:
        nonlocal steps, redriven
        steps += 1
        if stall_after is not None and steps > stall_after:
            redriven = True
        return True

    hop()
    rec = begin_tx(rc, cross)
    for s in sorted(cross.involved):
        hop()
        tc = shards[s]
        q = shard_prepare(tc, cross.txid, cross.subops[s].subop, rc.prepare_requests(cross.txid, s), rc.keys, rc.quorum)
        hop()
        try:
            rec = rc_apply(rc, q, tc.keys, tc.quorum)
        except StaleQuorum:
            rec = rc.record(cross.txid)
        if rec.state.terminal:
            break
    decisions = rc.decisions(cross.txid)
    for s in sorted(cross.involved):
        hop()
        shard_finalize(shards[s], cross.txid, decisions, rc.keys, rc.quorum)
    return RelayOutcome(cross.txid, rec.state.value, redriven, steps)


# -- simulated members --------------------------------------------------------------------


def _verify_new(host, msg, keys, seen: set) -> bool:
    key = (msg.sender, msg.signature)
    if key in seen:
        return True
    host.replica.signer.meter.charge("verify")
    if verify_msg(msg, keys):
        seen.add(key)
        return True
    return False


class RefMemberApp:
    """Reference-committee member: emits PrepareTx / decisions after its replica executes, re-drives on timeout."""

    def __init__(self, directory: Directory, ref: CommitteeInfo, redrive_timeout: float = 2.0,
                 max_backoff: float = 16.0):
        self.dir = directory
        self.ref = ref
        self.redrive_timeout = redrive_timeout
        self.max_backoff = max_backoff
        self.timers: dict[str, float] = {}
        self.backoff: dict[str, float] = {}
        self.votes: dict[tuple, dict] = {}
        self.acks: dict[str, dict] = {}
        self.acked: dict[str, set] = {}
        self.submitted: set = set()
        self._seen: set = set()

    def handles(self, msg) -> bool:
        return isinstance(msg, (Vote, Ack, AckBundle))

    def _signed(self, host, msg):
        return sign(msg, host.replica.signer)

    def _prepare_msgs(self, host, rec: RefTxRecord, shard: int):
        subop = load_subops(host.replica.state.kv, rec.txid).get(shard)
        if subop is None:
            return None
        return self._signed(host, PrepareTx(rec.txid, shard, subop, rec.client, host.node_id))

    def _arm(self, host, txid: str, reset: bool = False) -> None:
        if reset or txid not in self.backoff:
            self.backoff[txid] = self.redrive_timeout
        self.timers[txid] = host.sim.now + self.backoff[txid]

    def on_executed(self, host, block, receipts) -> list:
        out = []
        ops = {t.txid: t for t in block.txs}
        for r in receipts:
            t = ops.get(r.txid)
            if t is None or not isinstance(t.payload, RefCommitteeOp) or r.result is None:
                continue
            rec: RefTxRecord = r.result
            if r.status is not ReceiptStatus.COMMITTED and not rec.state.terminal:
                continue
            if rec.state is RefState.STARTED and isinstance(t.payload.op, BeginOp):
                if r.status is not ReceiptStatus.COMMITTED:
                    continue
                if rec.client:
                    for s in sorted(rec.involved):
                        m = self._prepare_msgs(host, rec, s)
                        if m is not None:
                            out.append((rec.client, m))
                self._arm(host, rec.txid, reset=True)
            elif rec.state.terminal:
                if rec.client:
                    out.append((rec.client, self._signed(host, Decision(rec.txid, _decision_for(rec.state), rec.client,
                                                                         host.node_id))))
                if rec.txid not in self.acked or self.acked[rec.txid] != set(rec.involved):
                    self._arm(host, rec.txid, reset=True)
        return out

    def on_timer(self, host, name: str) -> list:
        txid = name
        rec = load_record(host.replica.state.kv, txid)
        if rec is None:
            return []
        acked = self.acked.get(txid, set())
        if rec.state.terminal and acked >= set(rec.involved):
            self.backoff.pop(txid, None)
            return []
        out = []
        if rec.state.terminal:
            d = self._signed(host, Decision(txid, _decision_for(rec.state), rec.client, host.node_id))
            for s in sorted(rec.involved - acked):
                out += [(m, d) for m in self.dir.shards[s].members]
        else:
            for s in sorted(rec.involved - rec.counted):
                m = self._prepare_msgs(host, rec, s)
                if m is not None:
                    out += [(dst, m) for dst in self.dir.shards[s].members]
        host.sim.record(host.node_id, "redrive", {"txid": txid, "state": rec.state.value})
        self.backoff[txid] = min(self.backoff.get(txid, self.redrive_timeout) * 2, self.max_backoff)
        self.timers[txid] = host.sim.now + self.backoff[txid]
        return out

    def on_message(self, host, msg, src) -> list:
        if isinstance(msg, AckBundle):
            for a in msg.acks:
                self._on_ack(host, a)
            return []
        if isinstance(msg, Ack):
            self._on_ack(host, msg)
            return []
        if isinstance(msg, Vote):
            info = self.dir.shards.get(msg.committee)
            if info is None or not _verify_new(host, msg, info.keys, self._seen):
                return []
            bucket = self.votes.setdefault((msg.txid, msg.committee, msg.verdict), {})
            bucket[msg.sender] = msg
            if len(bucket) >= info.quorum:
                rec = load_record(host.replica.state.kv, msg.txid)
                vt = vote_txid(msg.txid, msg.committee)
                if rec is not None and not rec.state.terminal and msg.committee not in rec.counted \
                        and vt not in host.replica.state.txlog and (vt, msg.verdict) not in self.submitted:
                    self.submitted.add((vt, msg.verdict))
                    ev = tuple(sorted(bucket.values(), key=lambda v: str(v.sender)))[:info.quorum]
                    host.submit(Transaction(vt, RefCommitteeOp(VoteOp(msg.txid, msg.committee, msg.verdict)),
                                            evidence=ev))
        return []

    def _on_ack(self, host, a: Ack) -> None:
        info = self.dir.shards.get(a.committee)
        if info is None or not _verify_new(host, a, info.keys, self._seen):
            return
        bucket = self.acks.setdefault(a.txid, {}).setdefault((a.committee, a.status), set())
        bucket.add(a.sender)
        if len(bucket) >= info.quorum:
            self.acked.setdefault(a.txid, set()).add(a.committee)
            rec = load_record(host.replica.state.kv, a.txid)
            if rec is not None and rec.state.terminal and self.acked[a.txid] >= set(rec.involved):
                self.timers.pop(a.txid, None)
                self.backoff.pop(a.txid, None)
                self.acks.pop(a.txid, None)


class TxMemberApp:
    """Tx-committee member: turns coordinator quorums into phase ops and signs the outcomes.

    Votes and acks go to the relaying client; when the coordinator's members
    contacted us directly (re-drive), they go to those members as well.
    """

    lie = False

    def __init__(self, directory: Directory, shard: int):
        self.dir = directory
        self.shard = shard
        self.timers: dict[str, float] = {}
        self.prep: dict[str, dict] = {}
        self.dec: dict[tuple, dict] = {}
        self.direct: set = set()
        self.submitted: set = set()
        self._seen: set = set()

    def handles(self, msg) -> bool:
        return isinstance(msg, (PrepareTx, Decision))

    def _vote(self, host, txid: str, verdict: Verdict) -> Vote:
        if self.lie:
            verdict = Verdict.NOT_OK if verdict is Verdict.OK else Verdict.OK
        return sign(Vote(txid, self.shard, verdict, host.node_id), host.replica.signer)

    def _ack(self, host, txid: str, status: str) -> Ack:
        if self.lie:
            status = "aborted" if status == "committed" else "committed"
        return sign(Ack(txid, self.shard, status, host.node_id), host.replica.signer)

    def _to_ref(self, txid: str, msg) -> list:
        return [(m, msg) for m in self.dir.ref_for(txid).members]

    def on_executed(self, host, block, receipts) -> list:
        out = []
        ops = {t.txid: t for t in block.txs}
        for r in receipts:
            t = ops.get(r.txid)
            if t is None:
                continue
            p = t.payload
            client = t.evidence[0].client if t.evidence else ""
            if isinstance(p, PreparePhaseOp):
                verdict = Verdict.OK if r.status is ReceiptStatus.PREPARE_OK else Verdict.NOT_OK
                v = self._vote(host, p.txid, verdict)
                if client:
                    out.append((client, v))
                if p.txid in self.direct:
                    out += self._to_ref(p.txid, v)
            elif isinstance(p, (CommitPhaseOp, AbortPhaseOp)):
                status = finalized(host.replica.state, p.txid) or ("committed" if r.status is ReceiptStatus.COMMITTED
                                                                   else "aborted")
                a = self._ack(host, p.txid, status)
                if client:
                    out.append((client, a))
                if p.txid in self.direct:
                    out += self._to_ref(p.txid, a)
        return out

    def on_timer(self, host, name: str) -> list:
        return []

    def on_message(self, host, msg, src) -> list:
        ref = self.dir.ref_for(msg.txid)
        if not _verify_new(host, msg, ref.keys, self._seen):
            return []
        state = host.replica.state
        if isinstance(msg, PrepareTx):
            if msg.committee != self.shard:
                return []
            bucket = self.prep.setdefault(msg.txid, {})
            bucket[msg.sender] = msg
            self.direct.add(msg.txid)
            good = [m for m in bucket.values() if m.content() == msg.content()]
            if len(good) < ref.quorum:
                return []
            verdict = phase_verdict(state, msg.txid)
            if verdict is not None:
                return self._to_ref(msg.txid, self._vote(host, msg.txid, verdict))
            ptx = prep_txid(msg.txid, self.shard)
            if ptx not in self.submitted:
                self.submitted.add(ptx)
                ev = tuple(sorted(good, key=lambda m: str(m.sender)))[:ref.quorum]
                host.submit(Transaction(ptx, PreparePhaseOp(msg.txid, msg.subop), evidence=ev))
            return []
        if isinstance(msg, Decision):
            bucket = self.dec.setdefault((msg.txid, msg.decision), {})
            bucket[msg.sender] = msg
            self.direct.add(msg.txid)
            good = [m for m in bucket.values() if m.content() == msg.content()]
            if len(good) < ref.quorum:
                return []
            done = finalized(state, msg.txid)
            if done is not None:
                return self._to_ref(msg.txid, self._ack(host, msg.txid, done))
            commit = msg.decision is DecisionKind.COMMIT
            ftx = fin_txid(msg.txid) + (":c" if commit else ":a")
            if ftx not in self.submitted:
                self.submitted.add(ftx)
                ev = tuple(sorted(good, key=lambda m: str(m.sender)))[:ref.quorum]
                op = CommitPhaseOp(msg.txid) if commit else AbortPhaseOp(msg.txid)
                host.submit(Transaction(ftx, op, evidence=ev))
            return []
        return []


class LyingTxMemberApp(TxMemberApp):
    """Byzantine tx-committee member: signs the opposite verdict and status."""

    lie = True


# -- oracles -----------------------------------------------------------------------------


@dataclass
class AtomicityReport:
    begun: int
    terminated: int
    atomicity_violations: list
    unterminated: list
    dangling_locks: list

    @property
    def ok(self) -> bool:
        return not self.atomicity_violations and not self.unterminated and not self.dangling_locks


def check_atomicity(records: Mapping[str, RefTxRecord], shard_states: Mapping[int, Sequence[LedgerState]]) -> AtomicityReport:
    """Compare R's decision for each tx with what every honest replica of every involved shard applied."""
    violations, unterminated, dangling = [], [], []
    for txid, rec in sorted(records.items()):
        if not rec.state.terminal:
            unterminated.append((txid, rec.state.value))
            continue
        for s in sorted(rec.involved):
            for st in shard_states[s]:
                done = finalized(st, txid)
                if done is None:
                    unterminated.append((txid, s, st.txlog.get("2pc:" + txid)))
                elif (done == "committed") != (rec.state is RefState.COMMITTED):
                    violations.append((txid, s, rec.state.value, done))
    for s, states in sorted(shard_states.items()):
        for st in states:
            if st.locks():
                dangling.append((s, [k.decode(errors="replace") for k in st.locks()]))
    terminated = sum(1 for r in records.values() if r.state.terminal)
    return AtomicityReport(len(records), terminated, violations, unterminated, dangling)
