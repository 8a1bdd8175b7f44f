"""PBFT-family replica: HL baseline plus the trusted-log variants AHL, AHLPlus and AHLR.

A :class:`Replica` is a deterministic event-driven state machine.  The host
(simnet or a test) feeds it client requests, messages and timer expiries and
ships whatever it returns.  Broadcasts are addressed to every roster member,
the sender included; hosts deliver the self-copy by loopback.

Every PrePrepare/Prepare/Commit/Checkpoint/ViewChange carries an
:class:`~shardchain.enclave.AppendProof`.  Under HL the proof comes from a
plain host key (a Byzantine HL node can sign two digests for one slot);
under the TEE variants it comes from the node's enclave, whose write-once
slots make that impossible.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Optional, Sequence, Union

from .enclave import (
    AppendProof,
    Enclave,
    EnclaveError,
    EquivocationAttempt,
    HostSigner,
    LogAttestation,
    LogId,
    QuorumProof,
    Recovering,
    forge_attempt,
    verify_attestation,
    verify_quorum_proof,
    verify_signature,
)
from .ledger import (
    ZERO_DIGEST,
    Block,
    LedgerState,
    Transaction,
    apply_block,
    share_on_copy,
    state_digest,
)


class Variant(str, Enum):
    HL = "HL"
    AHL = "AHL"
    AHLPlus = "AHLPlus"
    AHLR = "AHLR"

    @property
    def trusted(self) -> bool:
        return self is not Variant.HL


class ConsensusError(Exception):
    pass


class ConfigError(ConsensusError):
    pass


class QueueFull(ConsensusError):
    pass


class DigestMismatch(ConsensusError):
    pass


class NoResponsivePeer(ConsensusError):
    pass


@dataclass(frozen=True)
class ConsensusConfig:
    variant: Variant
    n: int
    f: int
    batch_size: int = 64
    batch_timeout: float = 0.05
    K: int = 128
    L: int = 256
    request_timeout: float = 1.0
    view_change_timeout: float = 1.0
    queue_capacity: int = 4096
    max_timeout: float = 64.0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.f < 0 or self.n < 1:
            raise ConfigError("n >= 1 and f >= 0 required")
        if self.variant is Variant.HL and self.n < 3 * self.f + 1:
            raise ConfigError(f"HL needs n >= 3f+1 (n={self.n}, f={self.f})")
        if self.variant.trusted and self.n < 2 * self.f + 1:
            raise ConfigError(f"{self.variant.value} needs n >= 2f+1 (n={self.n}, f={self.f})")
        if self.K < 1 or self.L % self.K:
            raise ConfigError("L must be a positive multiple of K")
        if self.batch_size < 1:
            raise ConfigError("batch_size >= 1")

    @property
    def quorum(self) -> int:
        return 2 * self.f + 1 if self.variant is Variant.HL else self.f + 1


# -- messages -------------------------------------------------------------------


@dataclass(frozen=True)
class Request:
    tx: Transaction
    sender: Any = None


@dataclass(frozen=True)
class PrePrepare:
    view: int
    seq: int
    digest: bytes
    block: Block
    sender: int
    proof: AppendProof


@dataclass(frozen=True)
class Prepare:
    view: int
    seq: int
    digest: bytes
    sender: int
    proof: AppendProof


@dataclass(frozen=True)
class Commit:
    view: int
    seq: int
    digest: bytes
    sender: int
    proof: AppendProof


@dataclass(frozen=True)
class QuorumMsg:
    """AHLR: the leader's aggregated quorum for one phase of one slot."""

    view: int
    seq: int
    digest: bytes
    phase: LogId
    sender: int
    qc: QuorumProof


@dataclass(frozen=True)
class Checkpoint:
    seq: int
    state_digest: bytes
    sender: int
    proof: AppendProof


@dataclass(frozen=True)
class PreparedCert:
    view: int
    seq: int
    digest: bytes
    block: Block
    pp_proof: AppendProof
    prepare_proofs: tuple = ()
    qc: Optional[QuorumProof] = None


@dataclass(frozen=True)
class ViewChange:
    new_view: int
    sender: int
    stable_seq: int
    stable_digest: bytes
    stable_proofs: tuple
    prepared: tuple  # PreparedCert
    proof: AppendProof
    attestation: Optional[LogAttestation] = None


@dataclass(frozen=True)
class NewView:
    new_view: int
    sender: int
    view_changes: tuple
    preprepares: tuple


@dataclass(frozen=True)
class BlockRequest:
    seq: int
    sender: int


@dataclass(frozen=True)
class BlockReply:
    seq: int
    block: Block
    commit_proofs: tuple
    qc: Optional[QuorumProof]
    sender: int


@dataclass(frozen=True)
class StateRequest:
    min_seq: int
    sender: int


@dataclass(frozen=True)
class StateReply:
    seq: int
    state: LedgerState
    proofs: tuple
    sender: int


@dataclass(frozen=True)
class CkpQuery:
    sender: int
    nonce: int


@dataclass(frozen=True)
class CkpResponse:
    sender: int
    nonce: int
    ckp: int


@dataclass(frozen=True)
class Reply:
    """Per-block execution report sent to a client."""

    sender: int
    seq: int
    results: tuple  # (txid, status)


Message = Union[Request, PrePrepare, Prepare, Commit, QuorumMsg, Checkpoint, ViewChange, NewView,
                BlockRequest, BlockReply, StateRequest, StateReply, CkpQuery, CkpResponse, Reply]

CONSENSUS_TYPES = (PrePrepare, Prepare, Commit, QuorumMsg, Checkpoint, ViewChange, NewView,
                   BlockRequest, BlockReply, StateRequest, StateReply, CkpQuery, CkpResponse)


def classify(msg) -> str:
    return "request" if isinstance(msg, Request) else "consensus"


def _h(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for p in parts:
        h.update(len(p).to_bytes(4, "big"))
        h.update(p)
    return h.digest()


def vc_body_digest(new_view: int, stable_seq: int, stable_digest: bytes, prepared: Sequence[PreparedCert]) -> bytes:
    parts = [b"vc", str(new_view).encode(), str(stable_seq).encode(), stable_digest]
    for c in sorted(prepared, key=lambda c: c.seq):
        parts.append(b"%d:%d:" % (c.seq, c.view) + c.digest)
    return _h(*parts)


def null_block(seq: int) -> Block:
    return Block(seq, ZERO_DIGEST, ())


@dataclass
class Slot:
    view: int
    seq: int
    digest: Optional[bytes] = None
    block: Optional[Block] = None
    pp_proof: Optional[AppendProof] = None
    prepares: dict = field(default_factory=dict)
    commits: dict = field(default_factory=dict)
    prepare_qc: Optional[QuorumProof] = None
    commit_qc: Optional[QuorumProof] = None
    sent_prepare: bool = False
    sent_commit: bool = False
    sent_prepare_qc: bool = False
    sent_commit_qc: bool = False
    prepared: bool = False


@dataclass
class ReplicaStats:
    executed_blocks: int = 0
    executed_txs: int = 0
    view_changes: int = 0
    invalid_proofs: int = 0
    outside_watermarks: int = 0
    conflicting_preprepares: int = 0
    max_inflight: int = 0
    enclave_refusals: int = 0
    state_transfers: int = 0


Outbound = tuple  # (destination, message)


class Replica:
    """One consensus replica.

    ``roster`` lists the committee positions (node ids, ``None`` for a vacant
    seat); the leader of view v sits at position ``v % len(roster)``.
    ``keys`` maps node ids to the public keys their proofs verify under.
    ``validator(tx)`` may veto transactions carrying bad evidence; a vetoed
    transaction is never proposed and a block containing one is not prepared.
    """

    def __init__(self, node_id: int, config: ConsensusConfig, roster: Sequence[Optional[int]],
                 signer: Enclave, keys: dict, state: Optional[LedgerState] = None,
                 validator: Optional[Callable[[Transaction], bool]] = None):
        if len(roster) != config.n:
            raise ConfigError(f"roster has {len(roster)} seats, config says n={config.n}")
        if config.variant.trusted and isinstance(signer, HostSigner):
            raise ConfigError("trusted variants need an enclave signer")
        self.node_id = node_id
        self.config = config
        self.variant = config.variant
        self.roster = list(roster)
        self.past_rosters = [list(roster)]
        self.signer = signer
        self.keys = dict(keys)
        signer.register_peers(self.keys)
        self.validator = validator
        self.now = 0.0
        self.state = state if state is not None else LedgerState()
        self.view = 0
        self.vc_target: Optional[int] = None
        self.vc_streak = 0
        self.slots: dict[tuple[int, int], Slot] = {}
        self.committed: dict[int, tuple[Block, tuple, Optional[QuorumProof]]] = {}
        self.last_exec = self.state.height
        self.history: dict[int, bytes] = {}
        self.blocks: dict[int, tuple[Block, tuple, Optional[QuorumProof]]] = {}
        self.stable_seq = self.state.height
        self.stable_digest = state_digest(self.state)
        self.stable_proofs: tuple = ()
        self.snapshots: dict[int, LedgerState] = {self.stable_seq: self.state}
        self.checkpoint_votes: dict[tuple[int, bytes], dict[int, AppendProof]] = {}
        self.pool: dict[str, Transaction] = {}
        self.unproposed: dict[str, Transaction] = {}
        self.next_seq = self.last_exec + 1
        self.last_proposed = ZERO_DIGEST
        self.vcs: dict[int, dict[int, ViewChange]] = {}
        self.my_vcs: dict[int, ViewChange] = {}
        self.sent_new_view: set[int] = set()
        self.new_views: dict[int, NewView] = {}
        self.timers: dict[str, float] = {}
        self.stats = ReplicaStats()
        self.pending_state_req: Optional[int] = None
        self.state_req_rotation = 0
        self.probed = False
        self.catching_up = False  # pulling committed blocks past an adopted checkpoint
        self._verified: set = set()
        self.block_req_rotation = 0
        self.recovering = False
        self.recovery = None
        self.ckp_responses: dict[int, int] = {}
        self.sealed_for_recovery = None
        self.active = True  # False while a reconfiguring node has not finished state sync
        self.clients: dict[str, Any] = {}
        self.trace: list = []  # (event, payload) records drained by the host
        self.receipts_out: list = []  # (block, receipts) drained by the host
        self._nonce = 0

    def __deepcopy__(self, memo):
        # explicit clone: containers are copied one level down, frozen values are shared
        clone = object.__new__(type(self))
        memo[id(self)] = clone
        for k, v in self.__dict__.items():
            if k in ("config", "validator", "state", "recovery", "sealed_for_recovery"):
                val = v
            elif k == "signer":
                val = copy.deepcopy(v, memo)
            elif k == "slots":
                val = {key: replace(sl, prepares=dict(sl.prepares), commits=dict(sl.commits)) for key, sl in v.items()}
            elif isinstance(v, dict):
                val = {kk: (dict(vv) if isinstance(vv, dict) else vv) for kk, vv in v.items()}
            elif isinstance(v, (list, set)):
                val = type(v)(v)
            elif isinstance(v, ReplicaStats):
                val = copy.copy(v)
            else:
                val = copy.deepcopy(v, memo)
            setattr(clone, k, val)
        return clone

    # -- roster helpers -----------------------------------------------------

    @property
    def quorum(self) -> int:
        return self.config.quorum

    @property
    def members(self) -> list[int]:
        return [m for m in self.roster if m is not None]

    def _was_leader(self, node, view: int) -> bool:
        """Whether ``node`` led ``view`` under any roster used this epoch (evidence may predate a swap)."""
        return node is not None and any(r[view % len(r)] == node for r in self.past_rosters)

    def leader_of(self, view: int) -> Optional[int]:
        return self.roster[view % len(self.roster)]

    @property
    def leader(self) -> Optional[int]:
        return self.leader_of(self.view)

    @property
    def is_leader(self) -> bool:
        return self.leader == self.node_id and self.vc_target is None

    def _bcast(self, msg) -> list[Outbound]:
        return [(m, msg) for m in self.members]

    def _to_leader(self, msg) -> list[Outbound]:
        ldr = self.leader
        return [] if ldr is None else [(ldr, msg)]

    def _record(self, event: str, **payload) -> None:
        self.trace.append((event, payload))

    def _verify(self, proof: Optional[AppendProof], log_id: LogId, view: int, seq: int, digest: bytes,
                signer: Optional[int] = None) -> bool:
        if proof is None or not isinstance(proof, AppendProof):
            return False
        if (proof.log_id, proof.view, proof.seq, proof.digest) != (log_id, view, seq, digest):
            return False
        if signer is not None and proof.node_id != signer:
            return False
        pub = self.keys.get(proof.node_id)
        if pub is None:
            return False
        key = (proof.node_id, proof.signature)
        if key in self._verified:
            return True
        self.signer.meter.charge("verify")
        ok = verify_signature(pub, proof.body(), proof.signature)
        if ok:
            self._remember(key)
        return ok

    def _remember(self, key) -> None:
        # a replica checks each signature once; evidence bundles repeat many of them
        if len(self._verified) > 65536:
            self._verified.clear()
        self._verified.add(key)

    def _verify_qc(self, qc: Optional[QuorumProof], phase: LogId, view: int, seq: int, digest: bytes) -> bool:
        if qc is None or (qc.phase, qc.view, qc.seq, qc.digest) != (phase, view, seq, digest):
            return False
        if not self._was_leader(qc.issuer, view) or qc.f != self.config.f:
            return False
        if not set(qc.signers) <= set(self.keys):
            return False
        pub = self.keys.get(qc.issuer)
        self.signer.meter.charge("verify")
        return pub is not None and verify_quorum_proof(qc, pub)

    def _append(self, log_id: LogId, view: int, seq: int, digest: bytes) -> Optional[AppendProof]:
        try:
            proof = self.signer.log_append(log_id, view, seq, digest)
        except EnclaveError as exc:
            self.stats.enclave_refusals += 1
            self._record("enclave_refused", log=log_id.value, view=view, seq=seq, error=type(exc).__name__)
            return None
        self._record("append", log=log_id.value, view=view, seq=seq, digest=digest.hex())
        return proof

    def in_watermarks(self, seq: int) -> bool:
        return self.stable_seq < seq <= self.stable_seq + self.config.L

    def _slot(self, view: int, seq: int) -> Slot:
        s = self.slots.get((view, seq))
        if s is None:
            s = self.slots[(view, seq)] = Slot(view, seq)
        return s

    def current_timeout(self, base: float) -> float:
        return min(base * (2 ** self.vc_streak), self.config.max_timeout)

    # -- client requests ---------------------------------------------------

    def on_client_request(self, tx: Transaction) -> list[Outbound]:
        if not self.active or self.recovering:
            return []
        done = self.state.txlog.get(tx.txid)
        if done is not None:
            # a retrying client missed our reply (or we caught up by state transfer)
            if tx.client and done in ("C", "A"):
                status = "Committed" if done == "C" else "Aborted"
                return [(tx.client, Reply(self.node_id, self.last_exec, ((tx.txid, status),)))]
            return []
        if tx.txid in self.pool:
            return []
        if len(self.pool) >= self.config.queue_capacity:
            raise QueueFull(f"replica {self.node_id} pool full")
        if self.validator is not None and not self.validator(tx):
            return []
        self._add_to_pool(tx)
        out: list[Outbound] = []
        req = Request(tx, self.node_id)
        if self.variant is Variant.AHLPlus:
            if self.leader != self.node_id:
                out += self._to_leader(req)
        else:
            out += self._bcast(req)
        out += self._maybe_propose()
        self._arm_request_timer()
        return out

    def _add_to_pool(self, tx: Transaction) -> None:
        self.pool[tx.txid] = tx
        self.unproposed[tx.txid] = tx

    def _arm_request_timer(self) -> None:
        if self.pool and "request" not in self.timers and self.vc_target is None:
            self.timers["request"] = self.now + self.current_timeout(self.config.request_timeout)

    # -- proposing -----------------------------------------------------------

    def _maybe_propose(self, force: bool = False) -> list[Outbound]:
        if not self.is_leader or not self.active or self.recovering:
            return []
        out: list[Outbound] = []
        while self.unproposed and self.next_seq <= self.stable_seq + self.config.L:
            if len(self.unproposed) < self.config.batch_size and not force:
                break
            txs = []
            while self.unproposed and len(txs) < self.config.batch_size:
                txid, tx = next(iter(self.unproposed.items()))
                del self.unproposed[txid]
                if txid not in self.state.txlog:
                    txs.append(tx)
            if not txs:
                continue
            out += self._propose(txs)
            force = False
        if self.unproposed and "batch" not in self.timers:
            self.timers["batch"] = self.now + self.config.batch_timeout
        elif not self.unproposed:
            self.timers.pop("batch", None)
        return out

    def _propose(self, txs: Sequence[Transaction]) -> list[Outbound]:
        seq = self.next_seq
        block = Block(seq, self.last_proposed, tuple(txs))
        return self._send_preprepare(self.view, seq, block)

    def _send_preprepare(self, view: int, seq: int, block: Block) -> list[Outbound]:
        proof = self._append(LogId.PRE_PREPARE, view, seq, block.digest)
        if proof is None:
            return []
        self.next_seq = max(self.next_seq, seq + 1)
        self.last_proposed = block.digest
        self._record("propose", view=view, seq=seq, digest=block.digest.hex(), txs=len(block.txs))
        inflight = sum(1 for s in range(self.last_exec + 1, self.next_seq) if s not in self.history)
        self.stats.max_inflight = max(self.stats.max_inflight, inflight)
        return self._bcast(PrePrepare(view, seq, block.digest, block, self.node_id, proof))

    # -- message handling ------------------------------------------------------

    def on_message(self, msg, sender=None) -> tuple[list[Outbound], list[Block]]:
        sender = getattr(msg, "sender", None) if sender is None else sender
        if getattr(msg, "sender", sender) != sender:
            return [], []
        executed: list[Block] = []
        out: list[Outbound] = []
        if self.recovering:
            out += self._on_message_recovering(msg, sender)
            return out, executed
        if not self.active:
            return out, executed
        handler = _HANDLERS.get(type(msg))
        if handler is None:
            return out, executed
        out += handler(self, msg, executed)
        return out, executed

    def _on_request(self, msg: Request, executed) -> list[Outbound]:
        tx = msg.tx
        if tx.txid in self.state.txlog or tx.txid in self.pool:
            return []
        if len(self.pool) >= self.config.queue_capacity:
            return []
        if self.validator is not None and not self.validator(tx):
            return []
        self._add_to_pool(tx)
        self._arm_request_timer()
        return self._maybe_propose()

    def _on_preprepare(self, msg: PrePrepare, executed) -> list[Outbound]:
        if msg.view != self.view or self.vc_target is not None:
            return []
        if msg.sender != self.leader_of(msg.view):
            return []
        if not self.in_watermarks(msg.seq):
            self.stats.outside_watermarks += 1
            return []
        if msg.seq <= self.last_exec:
            return []
        if not msg.block.verify() or msg.block.digest != msg.digest or msg.block.height != msg.seq:
            self.stats.invalid_proofs += 1
            return []
        if not self._verify(msg.proof, LogId.PRE_PREPARE, msg.view, msg.seq, msg.digest, msg.sender):
            self.stats.invalid_proofs += 1
            self._record("invalid_proof", kind="PrePrepare", sender=msg.sender, seq=msg.seq)
            return []
        slot = self._slot(msg.view, msg.seq)
        if slot.digest is not None and slot.digest != msg.digest:
            self.stats.conflicting_preprepares += 1
            self._record("conflicting_preprepare", view=msg.view, seq=msg.seq)
            return []
        if slot.pp_proof is not None:
            return []
        if self.validator is not None and not all(self.validator(tx) for tx in msg.block.txs):
            return []
        slot.digest, slot.block, slot.pp_proof = msg.digest, msg.block, msg.proof
        for tx in msg.block.txs:
            self.unproposed.pop(tx.txid, None)
        out: list[Outbound] = []
        out += self._send_prepare(slot)
        out += self._progress(slot, executed)
        return out

    def _send_prepare(self, slot: Slot) -> list[Outbound]:
        if slot.sent_prepare:
            return []
        proof = self._append(LogId.PREPARE, slot.view, slot.seq, slot.digest)
        if proof is None:
            return []
        slot.sent_prepare = True
        msg = Prepare(slot.view, slot.seq, slot.digest, self.node_id, proof)
        if self.variant is Variant.AHLR:
            return self._to_leader(msg)
        return self._bcast(msg)

    def _on_prepare(self, msg: Prepare, executed) -> list[Outbound]:
        if msg.view < self.view or msg.seq <= self.last_exec:
            return []
        if not self.in_watermarks(msg.seq):
            self.stats.outside_watermarks += 1
            return []
        if msg.sender not in self.members:
            return []
        if not self._verify(msg.proof, LogId.PREPARE, msg.view, msg.seq, msg.digest, msg.sender):
            self.stats.invalid_proofs += 1
            self._record("invalid_proof", kind="Prepare", sender=msg.sender, seq=msg.seq)
            return []
        slot = self._slot(msg.view, msg.seq)
        slot.prepares.setdefault(msg.sender, msg.proof)
        if msg.view != self.view or self.vc_target is not None:
            return []
        return self._progress(slot, executed)

    def _on_commit(self, msg: Commit, executed) -> list[Outbound]:
        if msg.view < self.view or msg.seq <= self.last_exec:
            return []
        if not self.in_watermarks(msg.seq):
            self.stats.outside_watermarks += 1
            return []
        if msg.sender not in self.members:
            return []
        if not self._verify(msg.proof, LogId.COMMIT, msg.view, msg.seq, msg.digest, msg.sender):
            self.stats.invalid_proofs += 1
            self._record("invalid_proof", kind="Commit", sender=msg.sender, seq=msg.seq)
            return []
        slot = self._slot(msg.view, msg.seq)
        slot.commits.setdefault(msg.sender, msg.proof)
        return self._progress(slot, executed)

    def _on_quorum(self, msg: QuorumMsg, executed) -> list[Outbound]:
        if self.variant is not Variant.AHLR or msg.seq <= self.last_exec:
            return []
        if msg.view < self.view or not self.in_watermarks(msg.seq):
            return []
        if not self._verify_qc(msg.qc, msg.phase, msg.view, msg.seq, msg.digest):
            self.stats.invalid_proofs += 1
            self._record("invalid_proof", kind="QuorumProof", sender=msg.sender, seq=msg.seq)
            return []
        slot = self._slot(msg.view, msg.seq)
        if msg.phase is LogId.PREPARE:
            slot.prepare_qc = slot.prepare_qc or msg.qc
        elif msg.phase is LogId.COMMIT:
            slot.commit_qc = slot.commit_qc or msg.qc
        return self._progress(slot, executed)

    def _matching(self, votes: dict, slot: Slot, log_id: LogId) -> int:
        return sum(1 for s, p in votes.items() if p.digest == slot.digest and s in self.members)

    def _progress(self, slot: Slot, executed: list) -> list[Outbound]:
        """Advance one slot through prepare → commit → execute as far as the evidence allows."""
        out: list[Outbound] = []
        live = slot.view == self.view and self.vc_target is None
        ahlr = self.variant is Variant.AHLR
        if slot.digest is None:
            # commit evidence for a block we never received: fetch it
            if self._commit_evidence(slot) is not None:
                out += self._request_block(slot.seq, slot)
            return out
        if live and ahlr and self.is_leader and not slot.sent_prepare_qc:
            if self._matching(slot.prepares, slot, LogId.PREPARE) >= self.quorum:
                out += self._aggregate(slot, LogId.PREPARE)
        if not slot.prepared:
            ok = slot.prepare_qc is not None if ahlr else self._matching(slot.prepares, slot, LogId.PREPARE) >= self.quorum
            if ok and slot.pp_proof is not None:
                slot.prepared = True
                self._record("prepared", view=slot.view, seq=slot.seq, digest=slot.digest.hex())
        if slot.prepared and live and not slot.sent_commit:
            proof = self._append(LogId.COMMIT, slot.view, slot.seq, slot.digest)
            if proof is not None:
                slot.sent_commit = True
                msg = Commit(slot.view, slot.seq, slot.digest, self.node_id, proof)
                out += self._to_leader(msg) if ahlr else self._bcast(msg)
        if live and ahlr and self.is_leader and not slot.sent_commit_qc:
            if self._matching(slot.commits, slot, LogId.COMMIT) >= self.quorum:
                out += self._aggregate(slot, LogId.COMMIT)
        evidence = self._commit_evidence(slot)
        if evidence is not None and slot.seq > self.last_exec and slot.seq not in self.committed:
            if slot.block is not None and slot.block.digest == slot.digest:
                self.committed[slot.seq] = (slot.block,) + evidence
                out += self._execute_ready(executed)
            else:
                out += self._request_block(slot.seq, slot)
        return out

    def _commit_evidence(self, slot: Slot) -> Optional[tuple]:
        if self.variant is Variant.AHLR:
            if slot.commit_qc is not None:
                return ((), slot.commit_qc)
            return None
        digests: dict[bytes, list] = {}
        for s, p in slot.commits.items():
            if s in self.members:
                digests.setdefault(p.digest, []).append(p)
        for d, proofs in digests.items():
            if len(proofs) >= self.quorum and (slot.digest is None or d == slot.digest):
                if slot.digest is None:
                    slot.digest = d
                return (tuple(proofs), None)
        return None

    def _aggregate(self, slot: Slot, phase: LogId) -> list[Outbound]:
        votes = slot.prepares if phase is LogId.PREPARE else slot.commits
        proofs = [p for s, p in votes.items() if p.digest == slot.digest and s in self.members]
        try:
            qc = self.signer.aggregate_quorum(proofs, self.config.f, slot.digest, phase, slot.view, slot.seq)
        except EnclaveError as exc:
            self._record("aggregate_failed", seq=slot.seq, error=type(exc).__name__)
            return []
        if phase is LogId.PREPARE:
            slot.sent_prepare_qc = True
        else:
            slot.sent_commit_qc = True
        return self._bcast(QuorumMsg(slot.view, slot.seq, slot.digest, phase, self.node_id, qc))

    def _request_block(self, seq: int, slot: Slot) -> list[Outbound]:
        if "block:%d" % seq in self.timers:
            return []
        self.timers["block:%d" % seq] = self.now + self.config.request_timeout
        if slot.commit_qc is not None:
            peers = list(slot.commit_qc.signers)
        else:
            peers = sorted(slot.commits)
        peers = [p for p in peers if p != self.node_id] or [m for m in self.members if m != self.node_id]
        if not peers:
            return []
        self.block_req_rotation += 1
        return [(peers[self.block_req_rotation % len(peers)], BlockRequest(seq, self.node_id))]

    # -- execution and checkpoints -----------------------------------------

    def _execute_ready(self, executed: list) -> list[Outbound]:
        out: list[Outbound] = []
        while self.last_exec + 1 in self.committed:
            seq = self.last_exec + 1
            block, proofs, qc = self.committed.pop(seq)
            self.state, receipts = apply_block(self.state, block)
            self.last_exec = seq
            self.history[seq] = block.digest
            self.blocks[seq] = (block, proofs, qc)
            self.stats.executed_blocks += 1
            self.stats.executed_txs += len(receipts)
            executed.append(block)
            self.receipts_out.append((block, receipts))
            self._record("execute", seq=seq, digest=block.digest.hex(), txs=[r.txid for r in receipts],
                         statuses=[r.status.value for r in receipts])
            for tx in block.txs:
                self.pool.pop(tx.txid, None)
                self.unproposed.pop(tx.txid, None)
            out += self._replies(seq, block, receipts)
            self.vc_streak = 0
            self.probed = False
            self.timers.pop("request", None)
            self.timers.pop("block:%d" % seq, None)
            self._arm_request_timer()
            if seq % self.config.K == 0:
                out += self._send_checkpoint(seq)
            if self.pending_state_req is not None and self.last_exec >= self.pending_state_req:
                self.pending_state_req = None
                self.timers.pop("state", None)
            if seq == self.stable_seq:
                self._collect_garbage()
        if self.is_leader and self.next_seq <= self.last_exec:
            self.next_seq = self.last_exec + 1
        if executed:
            out += self._maybe_propose()
        return out

    def _replies(self, seq: int, block: Block, receipts) -> list[Outbound]:
        by_client: dict[str, list] = {}
        for r in receipts:
            tx = next((t for t in block.txs if t.txid == r.txid), None)
            if tx is not None and tx.client:
                by_client.setdefault(tx.client, []).append((r.txid, r.status.value))
        return [(client, Reply(self.node_id, seq, tuple(res))) for client, res in sorted(by_client.items())]

    def _send_checkpoint(self, seq: int) -> list[Outbound]:
        digest = state_digest(self.state)
        self.snapshots[seq] = self.state
        proof = self._append(LogId.CHECKPOINT, 0, seq, digest)
        if proof is None:
            return []
        return self._bcast(Checkpoint(seq, digest, self.node_id, proof))

    def _on_checkpoint(self, msg: Checkpoint, executed) -> list[Outbound]:
        if msg.seq <= self.stable_seq or msg.sender not in self.members:
            return []
        if not self._verify(msg.proof, LogId.CHECKPOINT, 0, msg.seq, msg.state_digest, msg.sender):
            self.stats.invalid_proofs += 1
            return []
        votes = self.checkpoint_votes.setdefault((msg.seq, msg.state_digest), {})
        votes[msg.sender] = msg.proof
        if len(votes) >= self.quorum:
            return self._advance_stable(msg.seq, msg.state_digest, tuple(votes.values()), executed)
        return []

    def _advance_stable(self, seq: int, digest: bytes, proofs: tuple, executed) -> list[Outbound]:
        if seq <= self.stable_seq:
            return []
        self.stable_seq, self.stable_digest, self.stable_proofs = seq, digest, proofs
        self._record("stable", seq=seq, digest=digest.hex())
        self._collect_garbage()
        for key in [k for k in self.checkpoint_votes if k[0] <= seq]:
            del self.checkpoint_votes[key]
        for s in [s for s in self.snapshots if s < seq]:
            del self.snapshots[s]
        if self.last_exec < seq:
            # usually our own execution is just behind; transfer state only if it stays behind
            self.pending_state_req = max(seq, self.pending_state_req or 0)
            if "state" not in self.timers:
                self.timers["state"] = self.now + self.config.request_timeout / 2
            return []
        return self._maybe_propose()

    def _collect_garbage(self) -> None:
        upto = min(self.stable_seq, self.last_exec)
        for key in [k for k in self.slots if k[1] <= upto]:
            del self.slots[key]
        for s in [s for s in self.committed if s <= upto]:
            del self.committed[s]
        self.signer.garbage_collect(upto)

    # -- state transfer ----------------------------------------------------

    def _request_state(self, seq: int) -> list[Outbound]:
        self.pending_state_req = max(seq, self.pending_state_req or 0)
        self.timers["state"] = self.now + self.config.request_timeout
        peers = [m for m in self.members if m != self.node_id]
        if not peers:
            return []
        self.state_req_rotation += 1
        return [(peers[self.state_req_rotation % len(peers)], StateRequest(seq, self.node_id))]

    def _on_state_request(self, msg: StateRequest, executed) -> list[Outbound]:
        snap = self.snapshots.get(self.stable_seq)
        if snap is None or self.stable_seq < msg.min_seq or not self.stable_proofs:
            return []
        return [(msg.sender, StateReply(self.stable_seq, snap, self.stable_proofs, self.node_id))]

    def serve_state(self) -> StateReply:
        return StateReply(self.stable_seq, self.snapshots.get(self.stable_seq, self.state), self.stable_proofs, self.node_id)

    def verify_state_reply(self, msg: StateReply) -> bool:
        digest = state_digest(msg.state)
        if msg.state.height != msg.seq:
            return False
        signers = set()
        for p in msg.proofs:
            if p.node_id in self.keys and self._verify(p, LogId.CHECKPOINT, 0, msg.seq, digest, p.node_id):
                signers.add(p.node_id)
        return len(signers) >= self.quorum

    def _on_state_reply(self, msg: StateReply, executed) -> list[Outbound]:
        if msg.seq <= self.last_exec:
            return []
        if not self.verify_state_reply(msg):
            self._record("digest_mismatch", sender=msg.sender, seq=msg.seq)
            return self._request_state(self.pending_state_req or msg.seq)
        return self.adopt_state(msg, executed)

    def adopt_state(self, msg: StateReply, executed=None) -> list[Outbound]:
        self.state = msg.state
        self.last_exec = msg.seq
        self.stats.state_transfers += 1
        self._record("adopt_state", seq=msg.seq, digest=state_digest(msg.state).hex())
        for tx in list(self.pool):
            if tx in self.state.txlog:
                self.pool.pop(tx, None)
                self.unproposed.pop(tx, None)
        if msg.seq > self.stable_seq:
            self.stable_seq, self.stable_digest, self.stable_proofs = msg.seq, state_digest(msg.state), tuple(msg.proofs)
            self.signer.garbage_collect(msg.seq)
            for key in [k for k in self.slots if k[1] <= msg.seq]:
                del self.slots[key]
        self.snapshots[msg.seq] = msg.state
        self.pending_state_req = None
        self.timers.pop("state", None)
        self.next_seq = max(self.next_seq, self.last_exec + 1)
        out: list[Outbound] = []
        if executed is not None:
            out += self._execute_ready(executed)
            for slot in sorted(self.slots.values(), key=lambda s: s.seq):
                if slot.seq > self.last_exec:
                    out += self._progress(slot, executed)
        return out

    def catch_up(self) -> list[Outbound]:
        """Ask every peer for the committed blocks after our last executed one (used right after joining).

        Any peer may be about to leave, so the request goes to all of them; the first reply for each
        height wins and later duplicates are ignored, which also ends their pull chains."""
        peers = [m for m in self.members if m != self.node_id]
        if not peers:
            return []
        self.catching_up = True
        return [(p, BlockRequest(self.last_exec + 1, self.node_id)) for p in peers]

    def _on_block_request(self, msg: BlockRequest, executed) -> list[Outbound]:
        entry = self.blocks.get(msg.seq)
        if entry is None:
            return []
        block, proofs, qc = entry
        return [(msg.sender, BlockReply(msg.seq, block, proofs, qc, self.node_id))]

    def _on_block_reply(self, msg: BlockReply, executed) -> list[Outbound]:
        if msg.seq <= self.last_exec or msg.seq in self.committed or not msg.block.verify():
            return []
        if msg.block.height != msg.seq:
            return []
        d = msg.block.digest
        ok = False
        if self.variant is Variant.AHLR:
            qc = msg.qc
            ok = qc is not None and self._verify_qc(qc, LogId.COMMIT, qc.view, msg.seq, d)
        else:
            signers = set()
            views = {p.view for p in msg.commit_proofs}
            for p in msg.commit_proofs:
                if p.node_id in self.keys and len(views) == 1 and self._verify(p, LogId.COMMIT, p.view, msg.seq, d, p.node_id):
                    signers.add(p.node_id)
            ok = len(signers) >= self.quorum
        if not ok:
            self.stats.invalid_proofs += 1
            return []
        self.committed[msg.seq] = (msg.block, tuple(msg.commit_proofs), msg.qc)
        out = self._execute_ready(executed)
        if (self.pool or self.catching_up) and self.last_exec >= msg.seq:
            # keep pulling from a peer that is ahead of us
            out.append((msg.sender, BlockRequest(self.last_exec + 1, self.node_id)))
        return out

    # -- timers ------------------------------------------------------------

    def on_timeout(self, timer_id: str) -> list[Outbound]:
        """Handle an expired timer.  Executed blocks never result from a timeout."""
        self.timers.pop(timer_id, None)
        if self.recovering:
            return self._recovery_timeout(timer_id)
        if not self.active:
            return []
        if timer_id == "batch":
            return self._maybe_propose(force=True)
        if timer_id == "request":
            if not self.pool:
                return []
            out: list[Outbound] = []
            if not self.probed:
                # first expiry: maybe we are just behind, so ask peers for the next block
                self.probed = True
                if self.variant is Variant.AHLPlus and self.leader != self.node_id:
                    # fall back to the plain broadcast so every replica can watch the request
                    for tx in list(self.pool.values()):
                        out += [(m, Request(tx, self.node_id)) for m in self.members if m != self.node_id]
                out += [(m, BlockRequest(self.last_exec + 1, self.node_id)) for m in self.members if m != self.node_id]
                self._arm_request_timer()
                return out
            self.probed = False
            out += self.start_view_change(self.view + 1)
            return out
        if timer_id == "viewchange":
            target = (self.vc_target if self.vc_target is not None else self.view) + 1
            probe = [(m, BlockRequest(self.last_exec + 1, self.node_id)) for m in self.members if m != self.node_id]
            return probe + self.start_view_change(target)
        if timer_id == "state":
            if self.pending_state_req is not None and self.pending_state_req > self.last_exec:
                return self._request_state(self.pending_state_req)
            return []
        if timer_id.startswith("block:"):
            seq = int(timer_id.split(":")[1])
            if seq > self.last_exec:
                for (v, s), slot in self.slots.items():
                    if s == seq and self._commit_evidence(slot) is not None:
                        return self._request_block(seq, slot)
            return []
        return []

    # -- view change -------------------------------------------------------

    def _prepared_certs(self) -> list[PreparedCert]:
        best: dict[int, PreparedCert] = {}
        for (v, s), slot in self.slots.items():
            if not slot.prepared or s <= self.stable_seq or slot.block is None:
                continue
            if s in best and best[s].view >= v:
                continue
            if self.variant is Variant.AHLR:
                cert = PreparedCert(v, s, slot.digest, slot.block, slot.pp_proof, (), slot.prepare_qc)
            else:
                proofs = tuple(p for m, p in sorted(slot.prepares.items()) if p.digest == slot.digest)
                cert = PreparedCert(v, s, slot.digest, slot.block, slot.pp_proof, proofs, None)
            best[s] = cert
        return [best[s] for s in sorted(best)]

    def start_view_change(self, target: int) -> list[Outbound]:
        if target <= self.view or (self.vc_target is not None and target <= self.vc_target):
            return []
        self.vc_target = target
        self.vc_streak += 1
        self.stats.view_changes += 1
        self.timers.pop("request", None)
        self.timers.pop("batch", None)
        certs = self._prepared_certs()
        body = vc_body_digest(target, self.stable_seq, self.stable_digest, certs)
        try:
            proof, att = self.signer.view_change_append(target, self.stable_seq, body)
        except EnclaveError as exc:
            self.stats.enclave_refusals += 1
            self._record("enclave_refused", log="ViewChange", view=target, error=type(exc).__name__)
            self.timers["viewchange"] = self.now + self.current_timeout(self.config.view_change_timeout)
            return []
        vc = ViewChange(target, self.node_id, self.stable_seq, self.stable_digest, self.stable_proofs,
                        tuple(certs), proof, att)
        self.my_vcs[target] = vc
        self._record("view_change", new_view=target, stable=self.stable_seq, certs=len(certs))
        self.timers["viewchange"] = self.now + self.current_timeout(self.config.view_change_timeout)
        out = self._bcast(vc)
        if self.leader_of(target) is None:
            # vacant seat: nobody will send NewView, skip ahead immediately
            out += self.start_view_change(target + 1)
        return out

    def _valid_cert(self, c: PreparedCert, stable_seq: int) -> bool:
        if not isinstance(c, PreparedCert) or c.seq <= stable_seq or c.seq > stable_seq + self.config.L:
            return False
        if not c.block.verify() or c.block.digest != c.digest or c.block.height != c.seq:
            return False
        ldr = getattr(c.pp_proof, "node_id", None)
        if not self._was_leader(ldr, c.view) or not self._verify(c.pp_proof, LogId.PRE_PREPARE, c.view, c.seq,
                                                                  c.digest, ldr):
            return False
        if self.variant is Variant.AHLR:
            return self._verify_qc(c.qc, LogId.PREPARE, c.view, c.seq, c.digest)
        signers = {p.node_id for p in c.prepare_proofs
                   if p.node_id in self.keys and self._verify(p, LogId.PREPARE, c.view, c.seq, c.digest, p.node_id)}
        return len(signers) >= self.quorum

    def _valid_stable(self, seq: int, digest: bytes, proofs: tuple) -> bool:
        if seq == 0:
            return True
        if seq <= self.stable_seq and digest == self.stable_digest:
            return True
        signers = {p.node_id for p in proofs
                   if p.node_id in self.keys and self._verify(p, LogId.CHECKPOINT, 0, seq, digest, p.node_id)}
        return len(signers) >= self.quorum

    def valid_view_change(self, vc: ViewChange) -> bool:
        if vc.sender not in self.keys:
            return False
        body = vc_body_digest(vc.new_view, vc.stable_seq, vc.stable_digest, vc.prepared)
        if not self._verify(vc.proof, LogId.VIEW_CHANGE, vc.new_view, 0, body, vc.sender):
            return False
        if not self._valid_stable(vc.stable_seq, vc.stable_digest, vc.stable_proofs):
            return False
        seqs = [c.seq for c in vc.prepared]
        if len(set(seqs)) != len(seqs) or not all(self._valid_cert(c, vc.stable_seq) for c in vc.prepared):
            return False
        if self.variant.trusted:
            att = vc.attestation
            if att is None or att.node_id != vc.sender or att.new_view != vc.new_view or att.min_seq != vc.stable_seq:
                return False
            if not verify_attestation(att, self.keys[vc.sender]):
                return False
            certs = {c.seq: c for c in vc.prepared}
            for v, s, d in att.entries:
                c = certs.get(s)
                if c is None or c.view < v or (c.view == v and c.digest != d):
                    # the node hid something it committed to: drop the whole message
                    return False
        return True

    def _on_view_change(self, msg: ViewChange, executed) -> list[Outbound]:
        if msg.new_view <= self.view:
            return []
        bucket = self.vcs.setdefault(msg.new_view, {})
        if msg.sender in bucket:
            return []
        if not self.valid_view_change(msg):
            self.stats.invalid_proofs += 1
            self._record("invalid_view_change", sender=msg.sender, new_view=msg.new_view)
            return []
        bucket[msg.sender] = msg
        out: list[Outbound] = []
        # join rule: f+1 distinct replicas want a higher view
        mine = self.vc_target if self.vc_target is not None else self.view
        higher = {}
        for v, vcs in self.vcs.items():
            if v > mine:
                for s in vcs:
                    higher.setdefault(s, v)
                    higher[s] = min(higher[s], v)
        if len(higher) >= self.config.f + 1:
            target = min(v for v in self.vcs if v > mine and self.vcs[v])
            out += self.start_view_change(target)
        out += self._maybe_new_view(msg.new_view)
        return out

    def _maybe_new_view(self, target: int) -> list[Outbound]:
        if self.leader_of(target) != self.node_id or target in self.sent_new_view:
            return []
        if self.vc_target != target:
            return []
        vcs = self.vcs.get(target, {})
        if len(vcs) < self.quorum:
            return []
        chosen = tuple(vcs[s] for s in sorted(vcs)[: self.quorum])
        pps = self._compute_reproposals(target, chosen)
        signed = []
        for seq, block in pps:
            proof = self._append(LogId.PRE_PREPARE, target, seq, block.digest)
            if proof is None:
                return []
            signed.append(PrePrepare(target, seq, block.digest, block, self.node_id, proof))
        self.sent_new_view.add(target)
        nv = NewView(target, self.node_id, chosen, tuple(signed))
        self._record("new_view", new_view=target, reproposals=len(signed))
        return self._bcast(nv)

    def _compute_reproposals(self, target: int, vcs: Sequence[ViewChange]) -> list[tuple[int, Block]]:
        min_s = max(vc.stable_seq for vc in vcs)
        best: dict[int, PreparedCert] = {}
        for vc in vcs:
            for c in vc.prepared:
                if c.seq > min_s and (c.seq not in best or c.view > best[c.seq].view):
                    best[c.seq] = c
        max_s = max(best, default=min_s)
        return [(s, best[s].block if s in best else null_block(s)) for s in range(min_s + 1, max_s + 1)]

    def _on_new_view(self, msg: NewView, executed) -> list[Outbound]:
        target = msg.new_view
        if target <= self.view or (self.vc_target is not None and target < self.vc_target):
            return []
        if msg.sender != self.leader_of(target):
            return []
        senders = set()
        for vc in msg.view_changes:
            if vc.new_view != target or vc.sender in senders or not self.valid_view_change(vc):
                self.stats.invalid_proofs += 1
                return []
            senders.add(vc.sender)
        if len(senders) < self.quorum:
            return []
        expected = self._compute_reproposals(target, msg.view_changes)
        if len(expected) != len(msg.preprepares):
            return []
        for (seq, block), pp in zip(expected, msg.preprepares):
            if pp.seq != seq or pp.digest != block.digest or pp.view != target:
                return []
            if not self._verify(pp.proof, LogId.PRE_PREPARE, target, seq, pp.digest, msg.sender):
                return []
        return self._enter_view(msg, executed)

    def _enter_view(self, msg: NewView, executed) -> list[Outbound]:
        target = msg.new_view
        self.view = target
        self.vc_target = None
        self.new_views[target] = msg
        self.timers.pop("viewchange", None)
        if self.variant.trusted:
            self.signer.enter_view(target)
        self._record("enter_view", view=target)
        out: list[Outbound] = []
        best_stable = max(msg.view_changes, key=lambda vc: vc.stable_seq)
        if best_stable.stable_seq > self.stable_seq:
            out += self._advance_stable(best_stable.stable_seq, best_stable.stable_digest,
                                        best_stable.stable_proofs, executed)
        max_s = max((pp.seq for pp in msg.preprepares), default=best_stable.stable_seq)
        self.next_seq = max(max_s, self.last_exec) + 1
        self.last_proposed = msg.preprepares[-1].digest if msg.preprepares else self.last_proposed
        for key in [k for k in self.vcs if k <= target]:
            del self.vcs[key]
        reproposed = set()
        for pp in msg.preprepares:
            for tx in pp.block.txs:
                reproposed.add(tx.txid)
            out += self._on_preprepare(pp, executed)
        # rebuild the proposal queue from what is still waiting
        self.unproposed = {t: tx for t, tx in self.pool.items() if t not in reproposed and t not in self.state.txlog}
        for slot in sorted(self.slots.values(), key=lambda s: s.seq):
            if slot.view == target:
                out += self._progress(slot, executed)
        if self.variant is Variant.AHLPlus and self.leader != self.node_id:
            for tx in list(self.pool.values()):
                if tx.txid not in reproposed:
                    out += self._to_leader(Request(tx, self.node_id))
        out += self._maybe_propose()
        self._arm_request_timer()
        return out

    # -- rollback-safe restart ---------------------------------------------

    def begin_recovery(self, sealed) -> list[Outbound]:
        """Called after the enclave restarted: gather peer checkpoint reports."""
        self.recovering = True
        self.sealed_for_recovery = sealed
        self.ckp_responses = {}
        self._nonce += 1
        self.timers["recovery"] = self.now + self.config.request_timeout
        self._record("recovery_begin")
        return [(m, CkpQuery(self.node_id, self._nonce)) for m in self.members if m != self.node_id]

    def _on_ckp_query(self, msg: CkpQuery, executed) -> list[Outbound]:
        return [(msg.sender, CkpResponse(self.node_id, msg.nonce, self.stable_seq))]

    def _on_message_recovering(self, msg, sender) -> list[Outbound]:
        out: list[Outbound] = []
        if isinstance(msg, CkpResponse) and self.recovery is None and msg.nonce == self._nonce:
            self.ckp_responses[msg.sender] = msg.ckp
            if len(self.ckp_responses) >= 2 * self.config.f + 1:
                est = self.signer.unseal_and_recover(self.sealed_for_recovery, sorted(self.ckp_responses.items()),
                                                     self.config.f, self.config.L)
                self.recovery = est
                self._record("recovery_estimate", ckp_M=est.ckp_M, H_M=est.H_M)
                out += self._request_state(est.H_M)
        elif isinstance(msg, Checkpoint) and self.recovery is not None:
            if msg.seq >= self.recovery.H_M and msg.sender in self.members:
                votes = self.checkpoint_votes.setdefault((msg.seq, msg.state_digest), {})
                votes[msg.sender] = msg.proof
                if len(votes) >= self.quorum:
                    out += self._request_state(msg.seq)
        elif isinstance(msg, StateReply) and self.recovery is not None:
            if msg.seq >= self.recovery.H_M and self.verify_state_reply(msg):
                try:
                    self.signer.complete_recovery(list(msg.proofs), self.config.f)
                except EnclaveError:
                    return out
                self.recovering = False
                self._record("recovery_complete", seq=msg.seq, H_M=self.recovery.H_M)
                self.timers.pop("recovery", None)
                out += self.adopt_state(msg, [])
        elif isinstance(msg, (StateRequest, CkpQuery, BlockRequest)):
            pass
        return out

    def _recovery_timeout(self, timer_id: str) -> list[Outbound]:
        if self.recovery is None and timer_id == "recovery":
            self._nonce += 1
            self.ckp_responses = {}
            self.timers["recovery"] = self.now + self.config.request_timeout
            return [(m, CkpQuery(self.node_id, self._nonce)) for m in self.members if m != self.node_id]
        if self.recovery is not None and timer_id == "state":
            return self._request_state(max(self.recovery.H_M, self.pending_state_req or 0))
        return []

    # -- reconfiguration ---------------------------------------------------

    def set_roster(self, roster: Sequence[Optional[int]], keys: Optional[dict] = None) -> list[Outbound]:
        before = set(self.members)
        self.roster = list(roster)
        if self.roster not in self.past_rosters:
            self.past_rosters.append(list(roster))
        if keys:
            self.keys.update(keys)
            self.signer.register_peers(keys)
        if self.vc_target is None and self.leader is None and self.active:
            return self.start_view_change(self.view + 1)
        joined = [m for m in self.members if m not in before and m != self.node_id]
        if joined and self.active and self.vc_target is None:
            return self._replay_inflight(joined)
        return []

    def _replay_inflight(self, joined: list[int]) -> list[Outbound]:
        """Resend our own votes for uncommitted slots of this view to members that just joined.

        A newcomer starts from the last stable checkpoint and never saw the messages already
        exchanged for slots in flight; without them those slots may lack a quorum of current members.
        """
        out: list[Outbound] = []
        me = self.node_id
        for slot in sorted(self.slots.values(), key=lambda s: s.seq):
            if slot.view != self.view or slot.digest is None or slot.seq <= self.stable_seq:
                continue
            msgs = []
            if self.leader_of(slot.view) == me and slot.pp_proof is not None and slot.block is not None:
                msgs.append(PrePrepare(slot.view, slot.seq, slot.digest, slot.block, me, slot.pp_proof))
            if slot.sent_prepare and me in slot.prepares and self.variant is not Variant.AHLR:
                msgs.append(Prepare(slot.view, slot.seq, slot.digest, me, slot.prepares[me]))
            if slot.sent_commit and me in slot.commits and self.variant is not Variant.AHLR:
                msgs.append(Commit(slot.view, slot.seq, slot.digest, me, slot.commits[me]))
            if self.variant is Variant.AHLR and self.leader_of(slot.view) == me:
                for phase, qc in ((LogId.PREPARE, slot.prepare_qc), (LogId.COMMIT, slot.commit_qc)):
                    if qc is not None:
                        msgs.append(QuorumMsg(slot.view, slot.seq, slot.digest, phase, me, qc))
            out += [(m, msg) for m in joined for msg in msgs]
        return out


class EquivocatingReplica(Replica):
    """Byzantine replica that tries to send conflicting digests for one slot to the two halves.

    Under TEE variants the second append is refused, so the conflicting copy
    goes out with a recycled (invalid) proof.
    """

    def _halves(self):
        others = [m for m in self.members]
        mid = len(others) // 2
        return others[:mid], others[mid:]

    def _twin(self, block: Block) -> Block:
        return Block(block.height, block.parent_digest, tuple(reversed(block.txs)) if len(block.txs) > 1
                     else block.txs + (Transaction("equivocation:%d:%d" % (self.node_id, block.height),
                                                   _noop_payload()),))

    def _send_preprepare(self, view: int, seq: int, block: Block) -> list[Outbound]:
        out = super()._send_preprepare(view, seq, block)
        if not out:
            return out
        twin = self._twin(block)
        try:
            proof = self.signer.log_append(LogId.PRE_PREPARE, view, seq, twin.digest)
            self._record("equivocation", seq=seq, proven=True)
        except EnclaveError:
            proof = forge_attempt(out[0][1].proof, twin.digest)
            self._record("equivocation", seq=seq, proven=False)
        first, second = self._halves()
        pp2 = PrePrepare(view, seq, twin.digest, twin, self.node_id, proof)
        return [(d, m) for d, m in out if d in first] + [(d, pp2) for d in second]

    def _send_prepare(self, slot: Slot) -> list[Outbound]:
        out = super()._send_prepare(slot)
        if not out or self.variant is Variant.AHLR:
            return out
        fake = hashlib.sha256(b"fake" + (slot.digest or b"")).digest()
        try:
            proof = self.signer.log_append(LogId.PREPARE, slot.view, slot.seq, fake)
        except EnclaveError:
            proof = forge_attempt(out[0][1].proof, fake)
        first, second = self._halves()
        bad = Prepare(slot.view, slot.seq, fake, self.node_id, proof)
        return [(d, m) for d, m in out if d in first] + [(d, bad) for d in second]


def _noop_payload():
    from .ledger import KvUpdate

    return KvUpdate(((b"equivocation", b"1"),))


_HANDLERS = {
    Request: Replica._on_request,
    PrePrepare: Replica._on_preprepare,
    Prepare: Replica._on_prepare,
    Commit: Replica._on_commit,
    QuorumMsg: Replica._on_quorum,
    Checkpoint: Replica._on_checkpoint,
    ViewChange: Replica._on_view_change,
    NewView: Replica._on_new_view,
    BlockRequest: Replica._on_block_request,
    BlockReply: Replica._on_block_reply,
    StateRequest: Replica._on_state_request,
    StateReply: Replica._on_state_reply,
    CkpQuery: Replica._on_ckp_query,
}


def committee_checkpoint_sync(joining: Replica, peers: Sequence, max_rounds: int = 16) -> LedgerState:
    """Fetch and verify the latest stable state from peers, trying each in turn.

    ``peers`` are objects with ``serve_state()``; a silent peer returns None.
    Tampered replies are rejected and the next peer is tried.
    """
    last_error: Optional[Exception] = None
    for _ in range(max_rounds):
        for peer in peers:
            reply = peer.serve_state()
            if reply is None:
                continue
            if not joining.verify_state_reply(reply):
                last_error = DigestMismatch(f"state from {reply.sender} does not match its checkpoint evidence")
                continue
            joining.adopt_state(reply)
            joining.active = True
            return joining.state
    if last_error is not None:
        raise last_error
    raise NoResponsivePeer("no peer served state")


def make_signer(variant: Variant, node_id: int, seed, **kw) -> Enclave:
    cls = HostSigner if Variant(variant) is Variant.HL else Enclave
    return cls(node_id, seed, **kw)


def build_committee(config: ConsensusConfig, node_ids: Sequence[int], seed=0, state: Optional[LedgerState] = None,
                    byzantine: Optional[dict] = None, validator=None, costs=None) -> list[Replica]:
    """Instantiate one replica per node id with freshly keyed signers.

    ``byzantine`` maps a node id to a Replica subclass.
    """
    byzantine = byzantine or {}
    signers = {nid: make_signer(config.variant, nid, seed, costs=costs) for nid in node_ids}
    keys = {nid: s.public_key for nid, s in signers.items()}
    reps = []
    for nid in node_ids:
        cls = byzantine.get(nid, Replica)
        reps.append(cls(nid, config, list(node_ids), signers[nid], keys, state, validator))
    return reps


share_on_copy(ConsensusConfig, Request, PrePrepare, Prepare, Commit, QuorumMsg, Checkpoint, PreparedCert, ViewChange, NewView, BlockRequest, BlockReply, StateRequest, StateReply, CkpQuery, CkpResponse, Reply)
