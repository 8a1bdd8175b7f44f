from collections import deque
from dataclasses import replace

import pytest

from shardchain.consensus import (Commit, ConfigError, ConsensusConfig, DigestMismatch, NewView, NoResponsivePeer,
                                  PrePrepare, Prepare, QueueFull, Replica, Request, Variant, ViewChange,
                                  build_committee, committee_checkpoint_sync, make_signer)
from shardchain.ledger import KvUpdate, LedgerState, Transaction, state_digest
from shardchain.simnet.explore import explore_small_committee
from shardchain.simnet.scenarios import run_consensus_trace


def tx(i):
    return Transaction("t%d" % i, KvUpdate(((b"k%d" % (i % 5), b"%d" % i),)), "")


def committee(variant, n, f, **kw):
    cfg = ConsensusConfig(Variant(variant), n, f, **kw)
    return {r.node_id: r for r in build_committee(cfg, list(range(n)), seed=3)}


def pump(reps, out, drop=lambda dst, msg: False):
    """Deliver everything synchronously, FIFO; returns executed blocks per replica."""
    q = deque(out)
    executed = {i: [] for i in reps}
    while q:
        dst, msg = q.popleft()
        if dst not in reps or drop(dst, msg):
            continue
        more, blocks = reps[dst].on_message(msg)
        executed[dst] += blocks
        q.extend(more)
    return executed


def test_config_rules():
    assert ConsensusConfig(Variant.HL, 4, 1).quorum == 3
    assert ConsensusConfig(Variant.AHL, 3, 1).quorum == 2
    with pytest.raises(ConfigError):
        ConsensusConfig(Variant.HL, 3, 1)
    with pytest.raises(ConfigError):
        ConsensusConfig(Variant.AHL, 2, 1)
    with pytest.raises(ConfigError):
        ConsensusConfig(Variant.AHL, 3, 1, K=10, L=25)


def test_ahlplus_non_leader_forwards_once():
    reps = committee(Variant.AHLPlus, 3, 1)
    out = reps[1].on_client_request(tx(0))
    assert len(out) == 1
    dst, msg = out[0]
    assert dst == reps[1].leader == 0 and isinstance(msg, Request)


@pytest.mark.parametrize("variant,n", [(Variant.AHL, 3), (Variant.HL, 4), (Variant.AHLR, 3)])
def test_other_variants_broadcast_request(variant, n):
    reps = committee(variant, n, 1)
    out = reps[1].on_client_request(tx(0))
    assert sorted(d for d, m in out if isinstance(m, Request)) == list(range(n))


def test_leader_unit_batch_proposes_immediately():
    reps = committee(Variant.AHL, 3, 1, batch_size=1)
    out = reps[0].on_client_request(tx(0))
    pps = [m for _, m in out if isinstance(m, PrePrepare)]
    assert pps and all(m.seq == 1 for m in pps) and len({d for d, m in out if isinstance(m, PrePrepare)}) == 3


def _commits_after_prepares(variant, n, f, senders):
    """Deliver the PrePrepare and Prepares from ``senders`` to replica 1; return whether it sent a Commit."""
    reps = committee(variant, n, f, batch_size=1)
    out = reps[0].on_client_request(tx(0))
    pp = next(m for _, m in out if isinstance(m, PrePrepare))
    r = reps[1]
    sent, _ = r.on_message(pp)
    own = [m for _, m in sent if isinstance(m, Prepare)]
    for s in senders:
        if s == 1:
            sent2, _ = r.on_message(own[0])
        else:
            prep = reps[s].on_message(pp)[0] if s != 0 else []
            msg = next((m for _, m in prep if isinstance(m, Prepare)), None)
            if msg is None:
                continue
            sent2, _ = r.on_message(msg)
        sent += sent2
    return any(isinstance(m, Commit) for _, m in sent)


def test_ahl_commit_after_f_plus_1_prepares():
    assert _commits_after_prepares(Variant.AHL, 3, 1, [1, 2])
    assert not _commits_after_prepares(Variant.AHL, 3, 1, [1])


def test_hl_needs_2f_plus_1_prepares():
    assert not _commits_after_prepares(Variant.HL, 4, 1, [1, 2])
    assert _commits_after_prepares(Variant.HL, 4, 1, [1, 2, 3])


@pytest.mark.parametrize("variant,n", [(Variant.HL, 4), (Variant.AHL, 3), (Variant.AHLPlus, 3), (Variant.AHLR, 3)])
def test_fault_free_run_executes_everywhere(variant, n):
    reps = committee(variant, n, 1, batch_size=2, K=2, L=8)
    executed = {i: [] for i in reps}
    for i in range(6):
        res = pump(reps, reps[i % n].on_client_request(tx(i)))
        for k, v in res.items():
            executed[k] += v
    digests = {k: [b.digest for b in v] for k, v in executed.items()}
    assert all(len(v) == 3 for v in digests.values())
    assert len({tuple(v) for v in digests.values()}) == 1
    assert len({state_digest(r.state) for r in reps.values()}) == 1
    assert all(r.stable_seq >= 2 for r in reps.values())


def test_forged_prepare_is_discarded_silently():
    reps = committee(Variant.AHL, 3, 1, batch_size=1)
    out = reps[0].on_client_request(tx(0))
    pp = next(m for _, m in out if isinstance(m, PrePrepare))
    reps[1].on_message(pp)
    bad = Prepare(pp.view, pp.seq, pp.digest, 2, pp.proof)  # leader's proof, claimed by node 2
    sent, blocks = reps[1].on_message(bad)
    assert sent == [] and blocks == []
    assert reps[1].stats.invalid_proofs == 1


def test_no_pending_requests_no_timer():
    reps = committee(Variant.AHL, 3, 1)
    for r in reps.values():
        assert "request" not in r.timers
        assert r.on_timeout("request") == []
        assert r.view == 0 and r.stats.view_changes == 0


def test_leader_crash_view_change_executes_pending():
    reps = committee(Variant.AHL, 3, 1, batch_size=1)
    alive = {i: r for i, r in reps.items() if i != 0}
    out = []
    for r in alive.values():
        out += r.on_client_request(tx(7))
    pump(alive, out)
    assert all("request" in r.timers for r in alive.values())
    out = []
    for r in alive.values():
        out += r.on_timeout("request")  # first expiry probes peers
    pump(alive, out)
    out = []
    for r in alive.values():
        out += r.on_timeout("request")
    assert any(isinstance(m, ViewChange) for _, m in out)
    sent = []
    q = deque(out)
    while q:
        dst, msg = q.popleft()
        if dst in alive:
            more, _ = alive[dst].on_message(msg)
            sent += more
            q.extend(more)
    assert any(isinstance(m, NewView) and m.sender == 1 for _, m in sent)
    assert all(r.view == 1 for r in alive.values())
    assert all("t7" in r.state.txlog for r in alive.values())


def test_timeouts_double_per_view_change():
    reps = committee(Variant.AHL, 3, 1, request_timeout=1.0, view_change_timeout=1.0, max_timeout=64.0)
    r = reps[1]
    r.on_client_request(tx(1))
    seen = []
    for target in range(1, 5):
        r.start_view_change(target)
        seen.append(r.timers["viewchange"] - r.now)
    assert seen == [2.0, 4.0, 8.0, 16.0]
    assert r.stats.view_changes == 4


def _stable_committee():
    reps = committee(Variant.AHL, 3, 1, batch_size=1, K=2, L=8)
    for i in range(4):
        pump(reps, reps[0].on_client_request(tx(i)))
    assert all(r.stable_seq == 4 for r in reps.values())
    cfg = reps[0].config
    signer = make_signer(cfg.variant, 9, 3)
    keys = dict(reps[0].keys)
    keys[9] = signer.public_key
    joiner = Replica(9, cfg, [0, 1, 9], signer, keys)
    joiner.active = False
    return reps, joiner


def test_checkpoint_sync_adopts_honest_state():
    reps, joiner = _stable_committee()
    state = committee_checkpoint_sync(joiner, [reps[1]])
    assert state_digest(state) == reps[1].stable_digest and joiner.active
    assert joiner.last_exec == 4


class _Tampering:
    def __init__(self, rep):
        self.rep = rep

    def serve_state(self):
        good = self.rep.serve_state()
        kv = dict(good.state.kv)
        kv[b"k0"] = b"forged"
        bad = LedgerState(kv, good.state.height, dict(good.state.txlog))
        return replace(good, state=bad)


class _Silent:
    def serve_state(self):
        return None


def test_checkpoint_sync_rejects_tampered_then_retries():
    reps, joiner = _stable_committee()
    with pytest.raises(DigestMismatch):
        committee_checkpoint_sync(joiner, [_Tampering(reps[1])], max_rounds=2)
    state = committee_checkpoint_sync(joiner, [_Tampering(reps[1]), reps[2]])
    assert state_digest(state) == reps[2].stable_digest


def test_checkpoint_sync_silent_peers():
    _, joiner = _stable_committee()
    with pytest.raises(NoResponsivePeer):
        committee_checkpoint_sync(joiner, [_Silent(), _Silent()], max_rounds=3)


@pytest.mark.parametrize("variant", list(Variant))
def test_equivocating_leader_is_safe(variant):
    for seed in range(4):
        o = run_consensus_trace(variant, seed, "equivocate", requests=12)
        assert o.safe, o.violations


def test_tee_equivocation_never_yields_two_valid_proofs():
    for seed in range(4):
        assert run_consensus_trace(Variant.AHL, seed, "equivocate", requests=12).valid_equivocations == 0


def test_view_change_counter_monotone_under_crashes():
    o = run_consensus_trace(Variant.AHL, 1, "crash_leader", f=1, requests=12)
    assert o.safe and o.executed_all and o.view_changes >= 1


def test_pipeline_has_multiple_blocks_in_flight():
    reps = committee(Variant.AHL, 3, 1, batch_size=1)
    out = []
    for i in range(6):
        out += reps[0].on_client_request(tx(i))
    assert reps[0].stats.max_inflight >= 2
    pump(reps, out)
    assert all(r.last_exec == 6 for r in reps.values())


def test_ahl_and_ahlplus_execute_same_blocks():
    def run(variant):
        reps = committee(variant, 3, 1, batch_size=2)
        blocks = []
        for i in range(8):
            blocks += pump(reps, reps[0].on_client_request(tx(i)))[0]
        return [b.digest for b in blocks]

    assert run(Variant.AHL) == run(Variant.AHLPlus)


def test_ahl_and_ahlplus_same_sequence_in_simulation():
    a = run_consensus_trace(Variant.AHL, 5, "none", f=1, requests=16)
    b = run_consensus_trace(Variant.AHLPlus, 5, "none", f=1, requests=16)
    assert a.executed_all and b.executed_all and a.safe and b.safe


def test_queue_full_raised_at_capacity():
    reps = committee(Variant.AHL, 3, 1, queue_capacity=2, batch_size=64)
    r = reps[1]
    r.on_client_request(tx(0))
    r.on_client_request(tx(1))
    with pytest.raises(QueueFull):
        r.on_client_request(tx(2))


def test_explorer_smoke():
    res = explore_small_committee(Variant.AHL, f=1, max_states=3000, timer_budget=1)
    assert res.safe and res.states > 100
