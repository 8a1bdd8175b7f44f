"""Exhaustive schedule enumeration for a tiny committee.

Every interleaving of message deliveries and timer expiries is explored
depth-first, with states deduplicated by a fingerprint.  One member is
Byzantine: it equivocates whenever its enclave lets it (and ships forged
proofs when it does not), and the scheduler may reorder, delay forever or
deliver to a subset any message it sends.  After every step the two honest
replicas must agree on every sequence number both have executed.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field
from typing import Optional

from ..consensus import (
    Commit,
    ConsensusConfig,
    Prepare,
    PrePrepare,
    Request,
    Variant,
    ViewChange,
    build_committee,
    vc_body_digest,
)
from ..enclave import LogAttestation, LogId, forge_attempt
from ..ledger import ZERO_DIGEST, Block, KvUpdate, Transaction


@dataclass
class ExploreResult:
    states: int
    transitions: int
    violations: list = field(default_factory=list)
    complete: bool = True
    max_depth: int = 0
    executed_states: int = 0  # states in which some honest replica had executed a block
    noops: int = 0

    @property
    def safe(self) -> bool:
        return not self.violations


def _msg_key(dst, msg) -> tuple:
    proof = getattr(msg, "proof", None)
    return (dst, type(msg).__name__, getattr(msg, "view", getattr(msg, "new_view", None)), getattr(msg, "seq", None),
            getattr(msg, "digest", b"") or b"", getattr(msg, "sender", None),
            getattr(proof, "signature", b"")[:8] if proof is not None else b"")


def _replica_fingerprint(r) -> tuple:
    slots = []
    for key in sorted(r.slots):
        s = r.slots[key]
        slots.append((key, s.digest, tuple(sorted((k, v.digest) for k, v in s.prepares.items())),
                      tuple(sorted((k, v.digest) for k, v in s.commits.items())), s.sent_prepare,
                      s.sent_commit, s.prepared, s.prepare_qc is not None, s.commit_qc is not None))
    logs = tuple(sorted((lid.value, tuple(sorted((k, p.digest) for k, p in log.items())))
                        for lid, log in r.signer.logs.items()))
    return (r.node_id, r.view, r.vc_target, r.last_exec, tuple(sorted(r.history.items())), tuple(slots),
            tuple(sorted(r.pool)), tuple(sorted(r.timers)),
            tuple(sorted((v, tuple(sorted(b))) for v, b in r.vcs.items())), tuple(sorted(r.sent_new_view)),
            r.stable_seq, r.next_seq, logs, getattr(r.signer, "view_floor", None), r.probed,
            tuple(sorted(r.committed)))


def _fingerprint(reps: dict, pending: tuple, budget: tuple) -> bytes:
    h = hashlib.sha256()
    for nid in sorted(reps):
        h.update(repr(_replica_fingerprint(reps[nid])).encode())
    h.update(repr(sorted(_msg_key(d, m) for d, m in pending)).encode())
    h.update(repr(budget).encode())
    return h.digest()


def _disagreement(reps: dict, honest: tuple) -> Optional[tuple]:
    a, b = reps[honest[0]], reps[honest[1]]
    for seq in set(a.history) & set(b.history):
        if a.history[seq] != b.history[seq]:
            return (seq, a.history[seq].hex(), b.history[seq].hex())
    return None


def byzantine_menu(rep, txs, stable_digest) -> list:
    """Every slot-1 message the Byzantine leader can get its enclave to sign, plus forgeries.

    The enclave signs the first PrePrepare, Prepare and Commit; the
    conflicting versions reuse those signatures.  Its ViewChange hides the
    slot it committed to (so its attestation gives it away), and a second
    one drops the attestation entries while keeping the signature.
    """
    signer = rep.signer
    me = rep.node_id
    b1 = Block(1, ZERO_DIGEST, (txs[0],))
    b2 = Block(1, ZERO_DIGEST, (Transaction("evil", KvUpdate(((b"k", b"evil"),)), ""),))
    msgs = []
    pp = signer.log_append(LogId.PRE_PREPARE, 0, 1, b1.digest)
    msgs.append(PrePrepare(0, 1, b1.digest, b1, me, pp))
    msgs.append(PrePrepare(0, 1, b2.digest, b2, me, forge_attempt(pp, b2.digest)))
    pr = signer.log_append(LogId.PREPARE, 0, 1, b1.digest)
    msgs.append(Prepare(0, 1, b1.digest, me, pr))
    msgs.append(Prepare(0, 1, b2.digest, me, forge_attempt(pr, b2.digest)))
    cm = signer.log_append(LogId.COMMIT, 0, 1, b1.digest)
    msgs.append(Commit(0, 1, b1.digest, me, cm))
    msgs.append(Commit(0, 1, b2.digest, me, forge_attempt(cm, b2.digest)))
    body = vc_body_digest(1, 0, stable_digest, ())
    proof, att = signer.view_change_append(1, 0, body)
    msgs.append(ViewChange(1, me, 0, stable_digest, (), (), proof, att))
    if att is not None:
        hidden = LogAttestation(att.node_id, att.new_view, att.min_seq, (), att.signature)
        msgs.append(ViewChange(1, me, 0, stable_digest, (), (), proof, hidden))
    return msgs


def explore_small_committee(variant=Variant.AHL, f: int = 1, byzantine: int = 0, max_states: int = 200_000,
                            max_depth: int = 80, timer_budget: int = 2, seed: int = 0) -> ExploreResult:
    """Enumerate schedules for n = 2f+1 (trusted) or 3f+1 (HL) with one Byzantine leader.

    The Byzantine member ignores its inbox; its whole repertoire is the
    pre-signed :func:`byzantine_menu`, each item deliverable to each honest
    replica at most once, at any point.  One client transaction is held by
    every honest replica from the start, and each may see up to
    ``timer_budget`` timer expiries.  Exploration stops at ``max_states``
    distinct states or ``max_depth`` steps (``complete`` is then False).
    """
    variant = Variant(variant)
    n = 2 * f + 1 if variant.trusted else 3 * f + 1
    cfg = ConsensusConfig(variant, n, f, batch_size=1, batch_timeout=0.0, K=100, L=200,
                          request_timeout=1.0, view_change_timeout=1.0)
    nodes = list(range(n))
    reps = {r.node_id: r for r in build_committee(cfg, nodes, seed=seed)}
    honest = tuple(x for x in nodes if x != byzantine)
    txs = [Transaction("t0", KvUpdate(((b"k", b"0"),)), "")]

    def run(node: int, out: list, pend: list, rs: dict) -> None:
        queue = list(out)
        while queue:
            dst, msg = queue.pop(0)
            if dst == node:
                more, _ = rs[node].on_message(msg, node)
                queue += more
            elif dst != byzantine:
                pend.append((dst, msg))

    pending: list = []
    for nid in honest:
        for tx in txs:
            run(nid, reps[nid].on_client_request(tx), pending, reps)
    pending = [(d, m) for d, m in pending if not isinstance(m, Request)]
    menu = byzantine_menu(reps[byzantine], txs, reps[byzantine].stable_digest)
    pending += [(d, m) for m in menu for d in honest]
    honest_reps = {h: reps[h] for h in honest}
    budget = tuple(timer_budget if x in honest else 0 for x in nodes)
    reps = honest_reps
    nodes = list(honest)
    for r in reps.values():
        r.probed = True  # skip the catch-up probe so the first expiry goes straight to a view change
        r.trace.clear()

    result = ExploreResult(0, 0)
    # sleep-set reduction: moves at different replicas commute, so a move
    # already explored from a sibling need not be retried after an
    # independent one.  Visited states remember their sleep set; a revisit
    # with a smaller sleep set explores only the difference.
    visited: dict = {}
    noop_cache: set = set()
    stack = [(reps, tuple(pending), budget, 0, frozenset())]
    while stack:
        rs, pend, bud, depth, sleep = stack.pop()
        fp = _fingerprint(rs, pend, bud)
        prior = visited.get(fp)
        if prior is not None:
            if prior <= sleep:
                continue
            explore_only = prior - sleep
            visited[fp] = prior & sleep
        else:
            visited[fp] = sleep
            explore_only = None
            result.states += 1
            result.max_depth = max(result.max_depth, depth)
            bad = _disagreement(rs, honest)
            if bad is not None:
                result.violations.append(bad)
                continue
            if any(rs[h].last_exec > 0 for h in honest):
                result.executed_states += 1
        if result.states >= max_states:
            result.complete = False
            break
        if depth >= max_depth:
            result.complete = False
            continue
        moves = []
        seen_keys = set()
        for i, (dst, msg) in enumerate(pend):
            k = _msg_key(dst, msg)
            if k in seen_keys:
                continue
            seen_keys.add(k)
            moves.append(((dst, "msg", k), i))
        for nid in nodes:
            if bud[nid] > 0:
                for name in sorted(rs[nid].timers):
                    moves.append(((nid, "timer", name), None))
        done: list = []
        rep_fps = {nid: _replica_fingerprint(r) for nid, r in rs.items()}
        for mid, idx in moves:
            if mid in sleep or (explore_only is not None and mid not in explore_only):
                done.append(mid)
                continue
            # a step only touches the replica it runs on; the others are shared
            actor = mid[0]
            nrs = dict(rs)
            nrs[actor] = copy.deepcopy(rs[actor])
            npend = list(pend)
            nbud = list(bud)
            if mid[1] == "msg":
                dst, msg = npend.pop(idx)
                before = rep_fps[dst]
                if (before, mid) in noop_cache:
                    result.noops += 1
                    done.append(mid)
                    continue
                out, _ = nrs[dst].on_message(msg, getattr(msg, "sender", None))
                if not out and _replica_fingerprint(nrs[dst]) == before:
                    # a delivery that changes nothing is the same as never delivering it,
                    # which the current state already covers
                    noop_cache.add((before, mid))
                    result.noops += 1
                    done.append(mid)
                    continue
                run(dst, out, npend, nrs)
            else:
                nid, _, name = mid
                nbud[nid] -= 1
                run(nid, nrs[nid].on_timeout(name), npend, nrs)
            nrs[actor].trace.clear()
            nrs[actor].receipts_out.clear()
            result.transitions += 1
            child_sleep = frozenset(m for m in (sleep | frozenset(done)) if m[0] != mid[0])
            stack.append((nrs, tuple(npend), tuple(nbud), depth + 1, child_sleep))
            done.append(mid)
    return result
