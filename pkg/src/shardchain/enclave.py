"""Simulated trusted execution environment.

An :class:`Enclave` owns an Ed25519 key pair derived from a seed the host
never sees again.  It exposes attested write-once logs, a once-per-epoch
randomness beacon, AHLR quorum aggregation, PoET+ wait certificates, and
rollback-safe restart.  Every operation charges a simulated cost to a
:class:`CostMeter`, which the host drains to advance its clock.

Signature scheme: Ed25519 (``cryptography``).  Sealing: AES-GCM with a key
derived from the enclave seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Callable, Iterable, Optional, Sequence

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .ledger import share_on_copy


class EnclaveError(Exception):
    pass


class EquivocationAttempt(EnclaveError):
    pass


class Recovering(EnclaveError):
    pass


class StaleView(EnclaveError):
    """Append for a view below the enclave's view floor."""


class EpochAlreadyInvoked(EnclaveError):
    pass


class RestartGuardActive(EnclaveError):
    pass


class InsufficientQuorum(EnclaveError):
    pass


class MixedTargets(EnclaveError):
    pass


class WaitNotElapsed(EnclaveError):
    pass


class InsufficientResponses(EnclaveError):
    pass


class SealForged(EnclaveError):
    pass


class InvalidCheckpoint(EnclaveError):
    pass


class LogId(str, Enum):
    PRE_PREPARE = "PrePrepare"
    PREPARE = "Prepare"
    COMMIT = "Commit"
    CHECKPOINT = "Checkpoint"
    VIEW_CHANGE = "ViewChange"


# -- costs --------------------------------------------------------------------


def load_costs(path: Optional[str] = None) -> dict[str, float]:
    """Per-operation enclave costs in microseconds."""
    if path is None:
        text = resources.files("shardchain").joinpath("data/enclave_costs.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    raw = json.loads(text)
    return {k: float(v) for k, v in raw.items() if k != "unit"}


DEFAULT_COSTS = load_costs()


class CostMeter:
    """Accumulates simulated CPU time (microseconds) until the host drains it."""

    def __init__(self, costs: Optional[dict[str, float]] = None):
        self.costs = dict(DEFAULT_COSTS if costs is None else costs)
        self.pending_us = 0.0
        self.total_us = 0.0
        self.counts: dict[str, int] = {}

    def charge(self, op: str, times: float = 1.0, switch: bool = False) -> None:
        us = self.costs[op] * times + (self.costs["switch"] if switch else 0.0)
        self.pending_us += us
        self.total_us += us
        self.counts[op] = self.counts.get(op, 0) + 1

    def charge_us(self, us: float) -> None:
        self.pending_us += us
        self.total_us += us

    def drain(self) -> float:
        """Return pending cost in seconds and reset it."""
        s = self.pending_us * 1e-6
        self.pending_us = 0.0
        return s


# -- signed artifacts ---------------------------------------------------------


@lru_cache(maxsize=1 << 18)
def _verify_cached(pub: bytes, msg: bytes, sig: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(pub).verify(sig, msg)
        return True
    except (InvalidSignature, ValueError):
        return False


def verify_signature(pub: bytes, msg: bytes, sig: bytes) -> bool:
    return _verify_cached(bytes(pub), bytes(msg), bytes(sig))


@dataclass(frozen=True)
class AppendProof:
    node_id: int
    log_id: LogId
    view: int
    seq: int
    digest: bytes
    signature: bytes = b""

    def body(self) -> bytes:
        return b"|".join([b"append", str(self.node_id).encode(), self.log_id.value.encode(),
                          str(self.view).encode(), str(self.seq).encode(), self.digest])

    def slot(self) -> tuple:
        return (self.node_id, self.log_id, self.view, self.seq)


def verify_append_proof(proof: AppendProof, public_key: bytes, meter: Optional[CostMeter] = None) -> bool:
    if meter is not None:
        meter.charge("verify")
    if not isinstance(proof, AppendProof) or not isinstance(proof.log_id, LogId):
        return False
    return verify_signature(public_key, proof.body(), proof.signature)


@dataclass(frozen=True)
class LogAttestation:
    """Signed snapshot of the Commit-log entries above ``min_seq``, taken when a view change is appended."""

    node_id: int
    new_view: int
    min_seq: int
    entries: tuple[tuple[int, int, bytes], ...]  # (view, seq, digest)
    signature: bytes = b""

    def body(self) -> bytes:
        parts = [b"attest", str(self.node_id).encode(), str(self.new_view).encode(), str(self.min_seq).encode()]
        for v, s, d in self.entries:
            parts.append(b"%d:%d:" % (v, s) + d)
        return b"|".join(parts)


def verify_attestation(att: LogAttestation, public_key: bytes) -> bool:
    return verify_signature(public_key, att.body(), att.signature)


@dataclass(frozen=True)
class BeaconCert:
    node_id: int
    epoch: int
    rnd: int
    signature: bytes = b""

    def body(self) -> bytes:
        return b"beacon|%d|%d|%064x" % (self.node_id, self.epoch, self.rnd)


def verify_beacon_cert(cert: BeaconCert, public_key: bytes) -> bool:
    return verify_signature(public_key, cert.body(), cert.signature)


@dataclass(frozen=True)
class QuorumProof:
    issuer: int
    digest: bytes
    phase: LogId
    view: int
    seq: int
    f: int
    signers: tuple[int, ...]
    signature: bytes = b""

    def body(self) -> bytes:
        return b"|".join([b"quorum", str(self.issuer).encode(), self.digest, self.phase.value.encode(),
                          str(self.view).encode(), str(self.seq).encode(), str(self.f).encode(),
                          ",".join(map(str, self.signers)).encode()])


def verify_quorum_proof(qp: QuorumProof, public_key: bytes) -> bool:
    return len(set(qp.signers)) >= qp.f + 1 and verify_signature(public_key, qp.body(), qp.signature)


@dataclass(frozen=True)
class WaitCertificate:
    node_id: int
    round: int
    wait_time: float
    q: int
    signature: bytes = b""

    def body(self) -> bytes:
        return b"poet|%d|%d|%r|%d" % (self.node_id, self.round, self.wait_time, self.q)

    @property
    def valid_for_election(self) -> bool:
        return self.q == 0


def verify_wait_certificate(cert: WaitCertificate, public_key: bytes) -> bool:
    return cert.q == 0 and verify_signature(public_key, cert.body(), cert.signature)


@dataclass(frozen=True)
class SealedState:
    owner: int
    nonce: bytes
    ciphertext: bytes


@dataclass(frozen=True)
class RecoveryEstimate:
    ckp_M: int
    H_M: int
    L: int


@dataclass(frozen=True)
class EnclaveIdentity:
    node_id: int
    public_key: bytes
    instantiation_time: float


class MonotonicCounter:
    """Platform counter that survives enclave restarts.

    Records the epochs for which the beacon has been invoked.  The host can
    keep a reference to it but has no API to roll it back.
    """

    def __init__(self):
        self._value = 0
        self._epochs: set[int] = set()

    @property
    def value(self) -> int:
        return self._value

    def consume_epoch(self, epoch: int) -> bool:
        if epoch in self._epochs:
            return False
        self._epochs.add(epoch)
        self._value += 1
        return True

    def consumed(self, epoch: int) -> bool:
        return epoch in self._epochs


def compute_ckp_m(responses: Sequence[tuple[int, int]], f: int) -> int:
    """Largest reported v such that at least ``f`` other responders report values ≤ v."""
    best = None
    for j, v in responses:
        others = sum(1 for i, w in responses if i != j and w <= v)
        if others >= f and (best is None or v > best):
            best = v
    if best is None:
        raise InsufficientResponses("no qualifying checkpoint value")
    return best


def _derive_seed(seed, node_id: int) -> bytes:
    if isinstance(seed, int):
        seed = seed.to_bytes(32, "big", signed=False) if seed >= 0 else str(seed).encode()
    elif isinstance(seed, str):
        seed = seed.encode()
    return hashlib.sha256(b"enclave-key|" + bytes(seed) + b"|%d" % node_id).digest()


class Enclave:
    """One simulated enclave bound to a host node.

    The private key is kept in a name-mangled slot, excluded from pickling,
    and shared (not copied) by ``copy.deepcopy`` so that state-space search
    can clone replicas cheaply.
    """

    def __init__(self, node_id: int, seed, now: float = 0.0, costs: Optional[dict] = None,
                 counter: Optional[MonotonicCounter] = None, restart_guard: float = 0.0,
                 clock: Optional[Callable[[], float]] = None, rng: Optional[random.Random] = None):
        secret = _derive_seed(seed, node_id)
        self.__key = Ed25519PrivateKey.from_private_bytes(secret)
        self.__seal_key = hashlib.sha256(b"seal|" + secret).digest()
        self.node_id = node_id
        self.public_key = self.__key.public_key().public_bytes_raw()
        self.meter = CostMeter(costs)
        self.counter = counter if counter is not None else MonotonicCounter()
        self.restart_guard = restart_guard
        self.clock = clock or (lambda: now)
        self.instantiation_time = now
        self.incarnation = 0
        self._rng_seed = int.from_bytes(hashlib.sha256(b"rng|" + secret).digest()[:8], "big")
        self.rng = rng if rng is not None else random.Random(self._rng_seed)
        self.peer_keys: dict[int, bytes] = {node_id: self.public_key}
        self._reset_volatile()

    def _reset_volatile(self):
        self.logs: dict[LogId, dict[tuple[int, int], AppendProof]] = {lid: {} for lid in LogId}
        self.view_floor = 0
        self.seq_floor = 0
        self.recovering: Optional[RecoveryEstimate] = None
        self.last_stable_ckp = 0
        self._poet: Optional[tuple[int, float, float, int]] = None
        self._poet_round = 0
        self._seal_count = 0

    # -- plumbing --

    @property
    def identity(self) -> EnclaveIdentity:
        return EnclaveIdentity(self.node_id, self.public_key, self.instantiation_time)

    def register_peers(self, keys: dict[int, bytes]) -> None:
        self.peer_keys.update(keys)

    def now(self) -> float:
        return self.clock()

    def _sign(self, body: bytes) -> bytes:
        return self.__key.sign(body)

    def sign_message(self, body: bytes) -> bytes:
        """Plain signature for protocol messages outside the attested logs (domain-separated)."""
        self.meter.charge("sign")
        return self.__key.sign(b"msg|" + body)

    def __getstate__(self):
        raise TypeError("enclave state is not serializable")

    def __deepcopy__(self, memo):
        clone = object.__new__(type(self))
        memo[id(self)] = clone
        for k, v in self.__dict__.items():
            if k in ("_Enclave__key", "clock"):
                setattr(clone, k, v)
            elif isinstance(v, random.Random):
                r = random.Random()
                r.setstate(v.getstate())
                setattr(clone, k, r)
            elif k == "logs":
                setattr(clone, k, {lid: dict(log) for lid, log in v.items()})
            elif k == "peer_keys":
                setattr(clone, k, dict(v))
            else:
                setattr(clone, k, copy.deepcopy(v, memo))
        return clone

    def __repr__(self):
        return f"Enclave(node={self.node_id}, incarnation={self.incarnation})"

    # -- attested logs --

    def log_append(self, log_id: LogId, view: int, seq: int, digest: bytes) -> AppendProof:
        log_id = LogId(log_id)
        if self.recovering is not None:
            raise Recovering(f"node {self.node_id} recovering until checkpoint >= {self.recovering.H_M}")
        slot = (view, seq)
        existing = self.logs[log_id].get(slot)
        if existing is not None:
            if existing.digest == digest:
                return existing
            raise EquivocationAttempt(f"{log_id.value} slot {slot} already holds another digest")
        if log_id in (LogId.PRE_PREPARE, LogId.PREPARE, LogId.COMMIT):
            if view < self.view_floor:
                raise StaleView(f"view {view} < floor {self.view_floor}")
            if seq <= self.seq_floor:
                raise EquivocationAttempt(f"seq {seq} at or below recovered floor {self.seq_floor}")
        elif log_id is LogId.CHECKPOINT and seq < self.seq_floor:
            raise EquivocationAttempt(f"checkpoint {seq} at or below recovered floor {self.seq_floor}")
        self.meter.charge("ahl_append", switch=True)
        proof = AppendProof(self.node_id, log_id, view, seq, digest)
        proof = AppendProof(self.node_id, log_id, view, seq, digest, self._sign(proof.body()))
        self.logs[log_id][slot] = proof
        return proof

    def view_change_append(self, new_view: int, min_seq: int, digest: bytes) -> tuple[AppendProof, LogAttestation]:
        """Append a ViewChange and attest every Commit-log entry above ``min_seq``.

        Raises the view floor first, so the node can emit nothing further in
        older views after this returns.
        """
        proof = self.log_append(LogId.VIEW_CHANGE, new_view, 0, digest)
        self.view_floor = max(self.view_floor, new_view)
        entries = tuple(sorted((v, s, p.digest) for (v, s), p in self.logs[LogId.COMMIT].items() if s > min_seq))
        att = LogAttestation(self.node_id, new_view, min_seq, entries)
        att = LogAttestation(self.node_id, new_view, min_seq, entries, self._sign(att.body()))
        self.meter.charge("sign")
        return proof, att

    def enter_view(self, view: int) -> None:
        """Raise the view floor (after a NewView has been accepted)."""
        self.view_floor = max(self.view_floor, view)

    def garbage_collect(self, stable_seq: int) -> None:
        self.last_stable_ckp = max(self.last_stable_ckp, stable_seq)
        for lid in (LogId.PRE_PREPARE, LogId.PREPARE, LogId.COMMIT):
            log = self.logs[lid]
            for slot in [s for s in log if s[1] <= stable_seq]:
                del log[slot]
        # the slots stay burnt: appends at or below the stable checkpoint are refused
        self.seq_floor = max(self.seq_floor, stable_seq)

    # -- randomness beacon --

    def beacon_invoke(self, epoch: int, l: int) -> Optional[BeaconCert]:
        if epoch != 0 and self.now() - self.instantiation_time < self.restart_guard:
            raise RestartGuardActive(f"enclave younger than {self.restart_guard}")
        if not self.counter.consume_epoch(epoch):
            raise EpochAlreadyInvoked(f"epoch {epoch}")
        self.meter.charge("beacon", switch=True)
        # q == 0 with probability 2^-l; a real-valued l (e.g. log2(n)/2) thins by the same factor
        q = 0 if l <= 0 or self.rng.random() < 2.0 ** -l else 1
        rnd = self.rng.getrandbits(256)
        if q != 0:
            return None
        cert = BeaconCert(self.node_id, epoch, rnd)
        return BeaconCert(self.node_id, epoch, rnd, self._sign(cert.body()))

    # -- AHLR aggregation --

    def aggregate_quorum(self, messages: Sequence[AppendProof], f: int, digest: bytes, phase: LogId,
                         view: int, seq: int) -> QuorumProof:
        if not messages:
            raise InsufficientQuorum("no messages")
        phase = LogId(phase)
        signers: set[int] = set()
        for m in messages:
            if (m.digest, m.log_id, m.view, m.seq) != (digest, phase, view, seq):
                raise MixedTargets(f"message from {m.node_id} targets another request/phase/round")
            pub = self.peer_keys.get(m.node_id)
            if pub is not None and verify_signature(pub, m.body(), m.signature):
                signers.add(m.node_id)
        self.meter.charge("ahlr_aggregate_f8", times=(f + 1) / 9.0, switch=True)
        if len(signers) < f + 1:
            raise InsufficientQuorum(f"{len(signers)} distinct valid signers < {f + 1}")
        chosen = tuple(sorted(signers))
        qp = QuorumProof(self.node_id, digest, phase, view, seq, f, chosen)
        return QuorumProof(self.node_id, digest, phase, view, seq, f, chosen, self._sign(qp.body()))

    # -- PoET+ --

    def poet_begin(self, l: float, mean_wait: float) -> float:
        """Start a round: draw the wait time and q.  Returns the wait time the host must let elapse."""
        wait = self.rng.expovariate(1.0 / mean_wait) if mean_wait > 0 else 0.0
        # q == 0 with probability 2^-l; a real-valued l (e.g. log2(n)/2) thins by the same factor
        q = 0 if l <= 0 or self.rng.random() < 2.0 ** -l else 1
        self._poet_round += 1
        self._poet = (self._poet_round, self.now(), wait, q)
        self.meter.charge("switch")
        return wait

    def poet_certificate(self) -> Optional[WaitCertificate]:
        if self._poet is None:
            raise WaitNotElapsed("no round started")
        rnd, start, wait, q = self._poet
        if self.now() + 1e-12 < start + wait:
            raise WaitNotElapsed(f"{start + wait - self.now():.6f}s remaining")
        self._poet = None
        if q != 0:
            return None
        self.meter.charge("sign", switch=True)
        cert = WaitCertificate(self.node_id, rnd, wait, 0)
        return WaitCertificate(self.node_id, rnd, wait, 0, self._sign(cert.body()))

    # -- sealing and rollback-safe recovery --

    def seal(self) -> SealedState:
        heads = {lid.value: max((s for _, s in log), default=0) for lid, log in self.logs.items()}
        payload = json.dumps({"owner": self.node_id, "ckp": self.last_stable_ckp, "heads": heads,
                              "view_floor": self.view_floor}, sort_keys=True).encode()
        self._seal_count += 1
        nonce = hashlib.sha256(b"nonce|%d|%d|%d" % (self.node_id, self.incarnation, self._seal_count)).digest()[:12]
        ct = AESGCM(self.__seal_key).encrypt(nonce, payload, b"%d" % self.node_id)
        return SealedState(self.node_id, nonce, ct)

    def _unseal(self, sealed: SealedState) -> dict:
        if sealed.owner != self.node_id:
            raise SealForged("sealed by another enclave")
        try:
            plain = AESGCM(self.__seal_key).decrypt(sealed.nonce, sealed.ciphertext, b"%d" % self.node_id)
        except InvalidTag as exc:
            raise SealForged("authentication tag mismatch") from exc
        return json.loads(plain)

    def restart(self, now: Optional[float] = None) -> None:
        """Simulated crash + relaunch: volatile logs are lost, the counter survives."""
        self.incarnation += 1
        self.instantiation_time = self.now() if now is None else now
        self.rng = random.Random(self._rng_seed + self.incarnation)
        self._reset_volatile()

    def unseal_and_recover(self, sealed: SealedState, responses: Iterable[tuple[int, int]], f: int, L: int) -> RecoveryEstimate:
        state = self._unseal(sealed)
        uniq: dict[int, int] = {}
        for node, ckp in responses:
            if node != self.node_id and node not in uniq:
                uniq[node] = int(ckp)
        if len(uniq) < 2 * f + 1:
            raise InsufficientResponses(f"{len(uniq)} responses < {2 * f + 1}")
        ckp_m = compute_ckp_m(sorted(uniq.items()), f)
        est = RecoveryEstimate(ckp_m, L + ckp_m, L)
        self.recovering = est
        self.last_stable_ckp = int(state.get("ckp", 0))
        self.view_floor = int(state.get("view_floor", 0))
        return est

    def complete_recovery(self, proofs: Sequence[AppendProof], f: int) -> int:
        """Leave recovering mode given f+1 matching Checkpoint proofs at seq ≥ H_M."""
        if self.recovering is None:
            return self.seq_floor
        by_target: dict[tuple[int, bytes], set[int]] = {}
        for p in proofs:
            if p.log_id is not LogId.CHECKPOINT or p.seq < self.recovering.H_M:
                continue
            pub = self.peer_keys.get(p.node_id)
            if pub is None or not verify_signature(pub, p.body(), p.signature):
                continue
            by_target.setdefault((p.seq, p.digest), set()).add(p.node_id)
        good = [seq for (seq, _), nodes in by_target.items() if len(nodes) >= f + 1]
        if not good:
            raise InvalidCheckpoint(f"no stable checkpoint >= {self.recovering.H_M}")
        seq = max(good)
        self.recovering = None
        self.seq_floor = max(self.seq_floor, seq)
        self.last_stable_ckp = max(self.last_stable_ckp, seq)
        return seq


class HostSigner(Enclave):
    """Plain host key for the HL baseline: same proof format, no write-once enforcement.

    A Byzantine HL node can sign conflicting digests for one slot; this is
    exactly the power the trusted log removes.
    """

    def log_append(self, log_id: LogId, view: int, seq: int, digest: bytes) -> AppendProof:
        log_id = LogId(log_id)
        self.meter.charge("sign")
        proof = AppendProof(self.node_id, log_id, view, seq, digest)
        proof = AppendProof(self.node_id, log_id, view, seq, digest, self._sign(proof.body()))
        self.logs[log_id].setdefault((view, seq), proof)
        return proof

    def view_change_append(self, new_view: int, min_seq: int, digest: bytes):
        proof = self.log_append(LogId.VIEW_CHANGE, new_view, 0, digest)
        return proof, None

    def garbage_collect(self, stable_seq: int) -> None:
        self.last_stable_ckp = max(self.last_stable_ckp, stable_seq)
        for lid in LogId:
            log = self.logs[lid]
            for slot in [s for s in log if s[1] <= stable_seq and lid is not LogId.VIEW_CHANGE]:
                del log[slot]


def forge_attempt(proof: AppendProof, digest: bytes) -> AppendProof:
    """What an adversary without the key can do: rewrite fields, keep the old signature."""
    return AppendProof(proof.node_id, proof.log_id, proof.view, proof.seq, digest, proof.signature)


share_on_copy(AppendProof, LogAttestation, BeaconCert, QuorumProof, WaitCertificate, SealedState, RecoveryEstimate, EnclaveIdentity)
