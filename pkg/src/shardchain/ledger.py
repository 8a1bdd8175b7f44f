"""Key-value ledger state, transactions, blocks and their execution semantics.

Every other module builds on the types defined here.  Execution is a pure
function of ``(state, tx)``: :func:`execute_transaction` never mutates its
input state.  Balances are signed 64-bit integers rendered as decimal text.

Cross-shard transactions are split into prepare / commit / abort phases.  A
prepare writes lock tuples ``<"L_" + key, b"true">`` for every key it touches
and stores the intended writes in a shadow entry ``"P_" + txid``.  Locking is
no-wait: a prepare that meets an existing lock fails immediately.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Any, Iterable, Mapping, Optional, Union

LOCK_PREFIX = b"L_"
SHADOW_PREFIX = b"P_"
LOCK_VALUE = b"true"
INT64_MIN, INT64_MAX = -(2**63), 2**63 - 1

HASH_NAME = "sha256"


class LedgerError(Exception):
    """Base class for execution errors."""


class UnknownAccount(LedgerError):
    pass


class MalformedPayload(LedgerError):
    pass


class UnknownPreparedTx(LedgerError):
    pass


def _same(self, memo=None):
    return self


def share_on_copy(*classes) -> None:
    """Frozen values are never mutated, so copies may share them (keeps deepcopy of replicas cheap)."""
    for cls in classes:
        cls.__copy__ = _same
        cls.__deepcopy__ = _same


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def lock_key(key: bytes) -> bytes:
    return LOCK_PREFIX + key


def shadow_key(txid: str) -> bytes:
    return SHADOW_PREFIX + txid.encode()


def shard_of(key: bytes, num_shards: int) -> int:
    """Hash partitioning of base keys onto shards.  Lock keys follow their base key."""
    if key.startswith(LOCK_PREFIX):
        key = key[len(LOCK_PREFIX):]
    return int.from_bytes(sha256(key)[:8], "big") % num_shards


def encode_int(value: int) -> bytes:
    if not INT64_MIN <= value <= INT64_MAX:
        raise MalformedPayload(f"balance {value} outside int64")
    return str(int(value)).encode()


def decode_int(raw: bytes) -> int:
    try:
        return int(raw.decode())
    except (UnicodeDecodeError, ValueError) as exc:
        raise MalformedPayload(f"not an integer balance: {raw!r}") from exc


# -- payloads ---------------------------------------------------------------


@dataclass(frozen=True)
class KvUpdate:
    writes: tuple[tuple[bytes, bytes], ...]

    def keys(self) -> tuple[bytes, ...]:
        return tuple(k for k, _ in self.writes)


@dataclass(frozen=True)
class SmallBankPayment:
    src: bytes
    dst: bytes
    amount: int

    def keys(self) -> tuple[bytes, ...]:
        return (self.src, self.dst)


@dataclass(frozen=True)
class SubOp:
    """Per-shard slice of a cross-shard transaction.

    ``writes`` are absolute values; ``deltas`` are balance adjustments.  A
    negative delta requires the balance to stay non-negative.
    """

    writes: tuple[tuple[bytes, bytes], ...] = ()
    deltas: tuple[tuple[bytes, int], ...] = ()

    def keys(self) -> tuple[bytes, ...]:
        seen: dict[bytes, None] = {}
        for k, _ in self.writes:
            seen[k] = None
        for k, _ in self.deltas:
            seen[k] = None
        return tuple(seen)


@dataclass(frozen=True)
class PreparePhaseOp:
    txid: str
    subop: SubOp

    def keys(self) -> tuple[bytes, ...]:
        return self.subop.keys()


@dataclass(frozen=True)
class CommitPhaseOp:
    txid: str

    def keys(self) -> tuple[bytes, ...]:
        return ()


@dataclass(frozen=True)
class AbortPhaseOp:
    txid: str

    def keys(self) -> tuple[bytes, ...]:
        return ()


@dataclass(frozen=True)
class RefCommitteeOp:
    """Input to the reference committee's 2PC state machine.

    ``op`` is one of the coordination module's inputs (begin or vote).  The
    ledger stores the resulting records but delegates the transition logic.
    """

    op: Any

    def keys(self) -> tuple[bytes, ...]:
        return ()


Payload = Union[KvUpdate, SmallBankPayment, PreparePhaseOp, CommitPhaseOp, AbortPhaseOp, RefCommitteeOp]


@dataclass(frozen=True)
class Transaction:
    txid: str
    payload: Payload
    client: str = ""
    # quorum evidence attached by coordination (PrepareTx / decision messages)
    evidence: tuple = field(default=(), compare=False)

    def keys(self) -> tuple[bytes, ...]:
        return self.payload.keys()

    def shards(self, num_shards: int) -> frozenset[int]:
        return frozenset(shard_of(k, num_shards) for k in self.keys())

    def is_cross_shard(self, num_shards: int) -> bool:
        return len(self.shards(num_shards)) >= 2


class ReceiptStatus(str, Enum):
    COMMITTED = "Committed"
    ABORTED = "Aborted"
    PREPARE_OK = "PrepareOK"
    PREPARE_NOT_OK = "PrepareNotOK"


@dataclass(frozen=True)
class Receipt:
    txid: str
    status: ReceiptStatus
    reads: tuple[tuple[bytes, bytes], ...] = ()
    writes: tuple[tuple[bytes, bytes], ...] = ()
    error: Optional[str] = None
    result: Any = field(default=None, compare=False)


# -- state ------------------------------------------------------------------


@dataclass(frozen=True)
class LedgerState:
    """Immutable ledger snapshot.

    ``txlog`` maps every applied txid to its outcome label; it makes execution
    idempotent and lets phase operations find their earlier verdicts.
    """

    kv: Mapping[bytes, bytes] = field(default_factory=dict)
    height: int = 0
    txlog: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kv", MappingProxyType(dict(self.kv)))
        object.__setattr__(self, "txlog", MappingProxyType(dict(self.txlog)))

    def get(self, key: bytes) -> Optional[bytes]:
        return self.kv.get(key)

    def balance(self, account: Union[str, bytes]) -> int:
        key = account.encode() if isinstance(account, str) else account
        if key not in self.kv:
            raise UnknownAccount(key.decode(errors="replace"))
        return decode_int(self.kv[key])

    def locked(self, key: bytes) -> bool:
        return self.kv.get(lock_key(key)) == LOCK_VALUE

    def locks(self) -> list[bytes]:
        return sorted(k for k in self.kv if k.startswith(LOCK_PREFIX))

    def __reduce__(self):
        return (LedgerState, (dict(self.kv), self.height, dict(self.txlog)))


def genesis(balances: Optional[Mapping[str, int]] = None, kv: Optional[Mapping[bytes, bytes]] = None) -> LedgerState:
    data: dict[bytes, bytes] = dict(kv or {})
    for acc, bal in (balances or {}).items():
        data[acc.encode()] = encode_int(bal)
    return LedgerState(data, 0, {})


def state_digest(state: LedgerState) -> bytes:
    """SHA-256 over the canonical (sorted) encoding of kv, height and txlog."""
    h = hashlib.sha256()
    h.update(b"height:%d\n" % state.height)
    for k in sorted(state.kv):
        v = state.kv[k]
        h.update(len(k).to_bytes(4, "big") + k + len(v).to_bytes(4, "big") + v)
    h.update(b"\ntxlog\n")
    for txid in sorted(state.txlog):
        h.update(txid.encode() + b"=" + state.txlog[txid].encode() + b"\n")
    return h.digest()


# -- execution ----------------------------------------------------------------


class _Scratch:
    """Mutable working copy used while applying one or more transactions."""

    def __init__(self, state: LedgerState):
        self.kv = dict(state.kv)
        self.txlog = dict(state.txlog)
        self.height = state.height

    def freeze(self) -> LedgerState:
        return LedgerState(self.kv, self.height, self.txlog)


def _balance(kv: dict, key: bytes) -> int:
    if key not in kv:
        raise UnknownAccount(key.decode(errors="replace"))
    return decode_int(kv[key])


def _any_locked(kv: dict, keys: Iterable[bytes]) -> bool:
    return any(kv.get(lock_key(k)) == LOCK_VALUE for k in keys)


def _apply(s: _Scratch, tx: Transaction) -> Receipt:
    p = tx.payload
    if isinstance(p, KvUpdate):
        if not p.writes or any(not k for k, _ in p.writes):
            raise MalformedPayload("empty key set or empty key")
        if _any_locked(s.kv, p.keys()):
            s.txlog[tx.txid] = "A"
            return Receipt(tx.txid, ReceiptStatus.ABORTED, error="locked")
        for k, v in p.writes:
            s.kv[k] = v
        s.txlog[tx.txid] = "C"
        return Receipt(tx.txid, ReceiptStatus.COMMITTED, writes=tuple(p.writes))

    if isinstance(p, SmallBankPayment):
        if p.amount < 0 or not p.src or not p.dst:
            raise MalformedPayload("negative amount or empty account")
        src_bal = _balance(s.kv, p.src)
        dst_bal = _balance(s.kv, p.dst)
        reads = ((p.src, s.kv[p.src]), (p.dst, s.kv[p.dst]))
        if _any_locked(s.kv, p.keys()) or src_bal < p.amount:
            s.txlog[tx.txid] = "A"
            return Receipt(tx.txid, ReceiptStatus.ABORTED, reads=reads,
                           error="locked" if _any_locked(s.kv, p.keys()) else "insufficient funds")
        if p.src == p.dst:
            writes = ((p.src, s.kv[p.src]),)
        else:
            writes = ((p.src, encode_int(src_bal - p.amount)), (p.dst, encode_int(dst_bal + p.amount)))
        for k, v in writes:
            s.kv[k] = v
        s.txlog[tx.txid] = "C"
        return Receipt(tx.txid, ReceiptStatus.COMMITTED, reads=reads, writes=writes)

    if isinstance(p, (PreparePhaseOp, CommitPhaseOp, AbortPhaseOp)):
        if isinstance(p, PreparePhaseOp):
            receipt = _prepare(s, tx, p)
        else:
            receipt = _finish(s, tx, p.txid, commit=isinstance(p, CommitPhaseOp))
        ok = receipt.status in (ReceiptStatus.COMMITTED, ReceiptStatus.PREPARE_OK)
        s.txlog[tx.txid] = "C" if ok else "A"
        return receipt

    if isinstance(p, RefCommitteeOp):
        from . import coordination  # late import: coordination depends on ledger

        receipt = coordination.apply_ref_op(s.kv, tx.txid, p.op)
        s.txlog[tx.txid] = "C" if receipt.status is ReceiptStatus.COMMITTED else "A"
        return receipt

    raise MalformedPayload(f"unknown payload type {type(p).__name__}")


def _phase_key(txid: str) -> str:
    return "2pc:" + txid


def _prepare(s: _Scratch, tx: Transaction, p: PreparePhaseOp) -> Receipt:
    keys = p.subop.keys()
    if not keys or any(not k for k in keys):
        raise MalformedPayload("prepare without keys")
    phase = s.txlog.get(_phase_key(p.txid))
    if phase == "prepared":
        shadow = json.loads(s.kv[shadow_key(p.txid)])
        return Receipt(tx.txid, ReceiptStatus.PREPARE_OK, writes=_shadow_writes(shadow))
    if phase is not None:
        # refused earlier, already finalized, or aborted before it arrived
        return Receipt(tx.txid, ReceiptStatus.PREPARE_NOT_OK, error=f"phase {phase}")
    if _any_locked(s.kv, keys):
        s.txlog[_phase_key(p.txid)] = "refused"
        return Receipt(tx.txid, ReceiptStatus.PREPARE_NOT_OK, error="locked")
    intended: dict[bytes, bytes] = {}
    reads = []
    for k, v in p.subop.writes:
        if k in s.kv:
            reads.append((k, s.kv[k]))
        intended[k] = v
    for k, delta in p.subop.deltas:
        bal = _balance(s.kv, k)
        reads.append((k, s.kv[k]))
        base = decode_int(intended[k]) if k in intended else bal
        new = base + delta
        if new < 0:
            s.txlog[_phase_key(p.txid)] = "refused"
            return Receipt(tx.txid, ReceiptStatus.PREPARE_NOT_OK, reads=tuple(reads), error="insufficient funds")
        intended[k] = encode_int(new)
    for k in keys:
        s.kv[lock_key(k)] = LOCK_VALUE
    shadow = {
        "locks": [_b64(k) for k in keys],
        "writes": [[_b64(k), _b64(v)] for k, v in intended.items()],
    }
    s.kv[shadow_key(p.txid)] = json.dumps(shadow, sort_keys=True).encode()
    s.txlog[_phase_key(p.txid)] = "prepared"
    return Receipt(tx.txid, ReceiptStatus.PREPARE_OK, reads=tuple(reads), writes=_shadow_writes(shadow))


def _shadow_writes(shadow: dict) -> tuple[tuple[bytes, bytes], ...]:
    return tuple((_unb64(k), _unb64(v)) for k, v in shadow["writes"])


def _finish(s: _Scratch, tx: Transaction, txid: str, commit: bool) -> Receipt:
    phase = s.txlog.get(_phase_key(txid))
    if phase == "committed" and commit:
        return Receipt(tx.txid, ReceiptStatus.COMMITTED, error="duplicate")
    if phase in ("aborted", "refused") and not commit:
        s.txlog[_phase_key(txid)] = "aborted"
        return Receipt(tx.txid, ReceiptStatus.ABORTED, error="duplicate" if phase == "aborted" else None)
    if phase == "committed":
        # abort after commit: a decision can never flip
        return Receipt(tx.txid, ReceiptStatus.COMMITTED, error="conflicting decision")
    if phase in ("aborted", "refused"):
        return Receipt(tx.txid, ReceiptStatus.ABORTED, error="conflicting decision")
    if phase != "prepared":
        if commit:
            raise UnknownPreparedTx(txid)
        # Abort of a never-prepared tx: leave a tombstone so a late prepare is refused.
        s.txlog[_phase_key(txid)] = "aborted"
        return Receipt(tx.txid, ReceiptStatus.ABORTED, error="UnknownPreparedTx")
    shadow = json.loads(s.kv.pop(shadow_key(txid)))
    for k in shadow["locks"]:
        s.kv.pop(lock_key(_unb64(k)), None)
    if commit:
        writes = _shadow_writes(shadow)
        for k, v in writes:
            s.kv[k] = v
        s.txlog[_phase_key(txid)] = "committed"
        return Receipt(tx.txid, ReceiptStatus.COMMITTED, writes=writes)
    s.txlog[_phase_key(txid)] = "aborted"
    return Receipt(tx.txid, ReceiptStatus.ABORTED)


def execute_transaction(state: LedgerState, tx: Transaction) -> tuple[LedgerState, Receipt]:
    """Apply one transaction.  Raises :class:`LedgerError` subclasses on bad input."""
    s = _Scratch(state)
    receipt = _apply(s, tx)
    return s.freeze(), receipt


def apply_block(state: LedgerState, block: "Block", skip_seen: bool = True) -> tuple[LedgerState, list[Receipt]]:
    """Execute every transaction of ``block`` in order and bump the height.

    Transactions already in the txlog are skipped (a request proposed twice
    executes once).  Transactions that raise are recorded as aborted with the
    error name, so all replicas reach the same state.
    """
    s = _Scratch(state)
    receipts = []
    for tx in block.txs:
        if skip_seen and tx.txid in s.txlog:
            continue
        try:
            receipts.append(_apply(s, tx))
        except LedgerError as exc:
            s.txlog[tx.txid] = "A"
            receipts.append(Receipt(tx.txid, ReceiptStatus.ABORTED, error=type(exc).__name__))
    s.height = block.height
    return s.freeze(), receipts


# -- blocks -------------------------------------------------------------------

ZERO_DIGEST = bytes(32)


def tx_digest(tx: Transaction) -> bytes:
    return sha256(json.dumps(encode_transaction(tx), sort_keys=True).encode())


def _block_digest(height: int, parent: bytes, txs: tuple[Transaction, ...]) -> bytes:
    h = hashlib.sha256()
    h.update(b"block:%d:" % height)
    h.update(parent)
    for tx in txs:
        h.update(tx_digest(tx))
    return h.digest()


@dataclass(frozen=True)
class Block:
    height: int
    parent_digest: bytes
    txs: tuple[Transaction, ...]
    digest: bytes = b""

    def __post_init__(self):
        if not self.digest:
            object.__setattr__(self, "digest", _block_digest(self.height, self.parent_digest, self.txs))

    def verify(self) -> bool:
        return self.digest == _block_digest(self.height, self.parent_digest, self.txs)


def make_block(height: int, parent_digest: bytes, txs: Iterable[Transaction]) -> Block:
    return Block(height, parent_digest, tuple(txs))


def verify_chain(blocks: list[Block]) -> bool:
    """Digest recomputation and parent/height linkage of a contiguous chain."""
    for i, b in enumerate(blocks):
        if not b.verify():
            return False
        if i and (b.height != blocks[i - 1].height + 1 or b.parent_digest != blocks[i - 1].digest):
            return False
    return True


def replay(genesis_state: LedgerState, blocks: Iterable[Block]) -> LedgerState:
    state = genesis_state
    for b in blocks:
        state, _ = apply_block(state, b)
    return state


# -- canonical JSON -----------------------------------------------------------


def _b64(raw: bytes) -> str:
    return base64.b64encode(raw).decode()


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode())


def _pairs(pairs) -> list:
    return [[_b64(k), _b64(v)] for k, v in pairs]


def _encode_payload(p: Payload) -> dict:
    if isinstance(p, KvUpdate):
        return {"type": "KvUpdate", "writes": _pairs(p.writes)}
    if isinstance(p, SmallBankPayment):
        return {"type": "SmallBankPayment", "src": _b64(p.src), "dst": _b64(p.dst), "amount": p.amount}
    if isinstance(p, PreparePhaseOp):
        return {
            "type": "PreparePhaseOp",
            "txid": p.txid,
            "writes": _pairs(p.subop.writes),
            "deltas": [[_b64(k), d] for k, d in p.subop.deltas],
        }
    if isinstance(p, CommitPhaseOp):
        return {"type": "CommitPhaseOp", "txid": p.txid}
    if isinstance(p, AbortPhaseOp):
        return {"type": "AbortPhaseOp", "txid": p.txid}
    if isinstance(p, RefCommitteeOp):
        op = p.op
        body = op.to_json() if hasattr(op, "to_json") else repr(op)
        return {"type": "RefCommitteeOp", "op": body}
    raise MalformedPayload(type(p).__name__)


def encode_transaction(tx: Transaction) -> dict:
    return {"txid": tx.txid, "client": tx.client, "payload": _encode_payload(tx.payload)}


def decode_transaction(d: Mapping) -> Transaction:
    p = d["payload"]
    kind = p["type"]
    if kind == "KvUpdate":
        payload: Payload = KvUpdate(tuple((_unb64(k), _unb64(v)) for k, v in p["writes"]))
    elif kind == "SmallBankPayment":
        payload = SmallBankPayment(_unb64(p["src"]), _unb64(p["dst"]), int(p["amount"]))
    elif kind == "PreparePhaseOp":
        payload = PreparePhaseOp(p["txid"], SubOp(
            tuple((_unb64(k), _unb64(v)) for k, v in p["writes"]),
            tuple((_unb64(k), int(dlt)) for k, dlt in p["deltas"]),
        ))
    elif kind == "CommitPhaseOp":
        payload = CommitPhaseOp(p["txid"])
    elif kind == "AbortPhaseOp":
        payload = AbortPhaseOp(p["txid"])
    elif kind == "RefCommitteeOp":
        from . import coordination

        payload = RefCommitteeOp(coordination.ref_op_from_json(p["op"]))
    else:
        raise MalformedPayload(kind)
    return Transaction(d["txid"], payload, d.get("client", ""))


def encode_receipt(r: Receipt) -> dict:
    return {
        "txid": r.txid,
        "status": r.status.value,
        "reads": _pairs(r.reads),
        "writes": _pairs(r.writes),
    }


def decode_receipt(d: Mapping) -> Receipt:
    return Receipt(
        d["txid"],
        ReceiptStatus(d["status"]),
        tuple((_unb64(k), _unb64(v)) for k, v in d["reads"]),
        tuple((_unb64(k), _unb64(v)) for k, v in d["writes"]),
    )


def state_to_json(state: LedgerState) -> dict:
    return {
        "height": state.height,
        "kv": _pairs(sorted(state.kv.items())),
        "txlog": dict(sorted(state.txlog.items())),
    }


def state_from_json(d: Mapping) -> LedgerState:
    return LedgerState({_unb64(k): _unb64(v) for k, v in d["kv"]}, int(d["height"]), dict(d["txlog"]))


share_on_copy(KvUpdate, SmallBankPayment, SubOp, PreparePhaseOp, CommitPhaseOp, AbortPhaseOp, RefCommitteeOp, Transaction, Receipt, LedgerState, Block)
