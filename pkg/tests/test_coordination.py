import pytest
from hypothesis import given
from hypothesis import strategies as st

from shardchain.bench.runner import run_xshard_case
from shardchain.bench.workload import account_name
from shardchain.coordination import (CoordinationError, DuplicateTx, InsufficientEvidence,
                                     InvalidQuorum, RefState, RefTxRecord, ReferenceCommittee, StaleQuorum,
                                     TxCommittee, Verdict, VoteQuorum, begin_tx, check_atomicity, client_relay,
                                     rc_apply, rc_step, shard_finalize, shard_prepare, split_transaction)
from shardchain.enclave import Enclave
from shardchain.ledger import (KvUpdate, ReceiptStatus, SmallBankPayment, Transaction, genesis, shard_of)

S = 3


def accounts_by_shard(count=40):
    out = {}
    for i in range(count):
        name = account_name(i)
        out.setdefault(shard_of(name.encode(), S), []).append(name)
    return out


ACC = accounts_by_shard()


def system(byzantine=None):
    byzantine = byzantine or {}
    balances = {a: 100 for names in ACC.values() for a in names}
    ref = ReferenceCommittee("R", [Enclave(100 + i, b"ref") for i in range(3)], 2)
    shards = {}
    for s in range(S):
        mine = {a: v for a, v in balances.items() if shard_of(a.encode(), S) == s}
        shards[s] = TxCommittee(s, [Enclave(10 * (s + 1) + i, b"tc") for i in range(3)], 2, genesis(mine),
                                byzantine=byzantine.get(s, ()))
    return ref, shards


def pay(txid, src, dst, amount):
    return Transaction(txid, SmallBankPayment(src.encode(), dst.encode(), amount), "client")


def record(c=2, involved=(0, 1)):
    return RefTxRecord("x", RefState.STARTED, c, frozenset(involved))


def test_rc_step_edges():
    r = rc_step(record(), VoteQuorum("x", 0, Verdict.OK))
    assert (r.state, r.c) == (RefState.PREPARING, 1)
    r = rc_step(r, VoteQuorum("x", 1, Verdict.OK))
    assert r.state is RefState.COMMITTED and r.c == 0
    assert rc_step(record(), VoteQuorum("x", 0, Verdict.NOT_OK)).state is RefState.ABORTED
    prep = rc_step(record(3, (0, 1, 2)), VoteQuorum("x", 0, Verdict.OK))
    assert rc_step(prep, VoteQuorum("x", 1, Verdict.NOT_OK)).state is RefState.ABORTED


def test_rc_step_rejects_bad_quorums():
    with pytest.raises(InvalidQuorum):
        rc_step(record(), VoteQuorum("y", 0, Verdict.OK))
    with pytest.raises(InvalidQuorum):
        rc_step(record(), VoteQuorum("x", 7, Verdict.OK))
    once = rc_step(record(), VoteQuorum("x", 0, Verdict.OK))
    with pytest.raises(StaleQuorum):
        rc_step(once, VoteQuorum("x", 0, Verdict.OK))
    done = rc_step(record(), VoteQuorum("x", 0, Verdict.NOT_OK))
    with pytest.raises(StaleQuorum):
        rc_step(done, VoteQuorum("x", 1, Verdict.OK))


@given(st.lists(st.tuples(st.integers(0, 3), st.booleans()), max_size=12))
def test_rc_step_follows_state_machine(votes):
    """Any vote sequence moves only along the allowed edges and never leaves a terminal state."""
    rec = record(4, (0, 1, 2, 3))
    allowed = {RefState.STARTED: {RefState.PREPARING, RefState.ABORTED, RefState.COMMITTED},
               RefState.PREPARING: {RefState.PREPARING, RefState.COMMITTED, RefState.ABORTED}}
    for committee, ok in votes:
        try:
            new = rc_step(rec, VoteQuorum("x", committee, Verdict.OK if ok else Verdict.NOT_OK))
        except StaleQuorum:
            assert rec.state.terminal or committee in rec.counted
            continue
        assert not rec.state.terminal
        assert new.state in allowed[rec.state]
        if new.state is RefState.COMMITTED:
            assert new.c == 0
        rec = new


def test_split_partitions_by_shard():
    src, dst = ACC[0][0], ACC[1][0]
    cross = split_transaction(pay("t", src, dst, 5), S)
    assert cross.involved == frozenset({0, 1})
    assert cross.subops[0].subop.deltas == ((src.encode(), -5),)
    assert cross.subops[1].subop.deltas == ((dst.encode(), 5),)
    kv = Transaction("k", KvUpdate(tuple((a.encode(), b"v") for a in (ACC[0][0], ACC[1][0], ACC[2][0]))))
    assert split_transaction(kv, S).involved == frozenset({0, 1, 2})


def test_begin_tx_three_shards_and_duplicate():
    ref, shards = system()
    kv = Transaction("k", KvUpdate(tuple((a.encode(), b"v") for a in (ACC[0][0], ACC[1][0], ACC[2][0]))), "c")
    cross = split_transaction(kv, S)
    rec = begin_tx(ref, cross)
    assert rec.state is RefState.STARTED and rec.c == 3
    assert all(len(ref.prepare_requests("k", s)) == 3 for s in range(S))
    before = ref.state
    with pytest.raises(DuplicateTx):
        begin_tx(ref, cross)
    assert ref.state is before


def test_single_shard_bypasses_coordination():
    ref, shards = system()
    a, b = ACC[0][:2]
    out = client_relay(pay("local", a, b, 5), ref, shards, S)
    assert out.status == ReceiptStatus.COMMITTED.value and ref.record("local") is None
    with pytest.raises(CoordinationError):
        begin_tx(ref, split_transaction(pay("l2", a, b, 1), S))


def test_prepare_needs_evidence_quorum():
    ref, shards = system()
    cross = split_transaction(pay("t", ACC[0][0], ACC[1][0], 5), S)
    begin_tx(ref, cross)
    reqs = ref.prepare_requests("t", 0)
    with pytest.raises(InsufficientEvidence):
        shard_prepare(shards[0], "t", cross.subops[0].subop, reqs[:1], ref.keys, ref.quorum)
    q = shard_prepare(shards[0], "t", cross.subops[0].subop, reqs[:2], ref.keys, ref.quorum)
    assert q.verdict is Verdict.OK and q.verify(shards[0].keys, 2)


def test_locked_key_votes_not_ok_and_aborts():
    ref, shards = system()
    a, b, c = ACC[0][0], ACC[1][0], ACC[1][1]
    t1 = split_transaction(pay("t1", a, b, 5), S)
    t2 = split_transaction(pay("t2", c, a, 5), S)
    begin_tx(ref, t1)
    begin_tx(ref, t2)
    q1 = shard_prepare(shards[0], "t1", t1.subops[0].subop, ref.prepare_requests("t1", 0), ref.keys, 2)
    q2 = shard_prepare(shards[0], "t2", t2.subops[0].subop, ref.prepare_requests("t2", 0), ref.keys, 2)
    assert q1.verdict is Verdict.OK and q2.verdict is Verdict.NOT_OK
    assert rc_apply(ref, q2, shards[0].keys, 2).state is RefState.ABORTED
    # a replayed vote is the same ledger transaction: no new effect
    before = ref.state
    assert rc_apply(ref, q2, shards[0].keys, 2).state is RefState.ABORTED
    assert ref.state is before


def test_commit_and_abort_finalize():
    ref, shards = system()
    a, b = ACC[0][0], ACC[1][0]
    cross = split_transaction(pay("t", a, b, 30), S)
    begin_tx(ref, cross)
    for s in (0, 1):
        q = shard_prepare(shards[s], "t", cross.subops[s].subop, ref.prepare_requests("t", s), ref.keys, 2)
        rec = rc_apply(ref, q, shards[s].keys, 2)
    assert rec.state is RefState.COMMITTED
    dec = ref.decisions("t")
    for s in (0, 1):
        shard_finalize(shards[s], "t", dec, ref.keys, 2)
    # a duplicate decision quorum changes nothing
    before = shards[1].state
    shard_finalize(shards[1], "t", dec, ref.keys, 2)
    assert shards[1].state is before
    assert shards[0].state.balance(a) == 70 and shards[1].state.balance(b) == 130
    assert not shards[0].state.locks() and not shards[1].state.locks()
    with pytest.raises(InsufficientEvidence):
        shard_finalize(shards[0], "t", dec[:1], ref.keys, 2)


def test_abort_restores_values():
    ref, shards = system()
    a, b = ACC[0][0], ACC[1][0]
    cross = split_transaction(pay("t", a, b, 500), S)  # overdraft at the payer's shard
    begin_tx(ref, cross)
    q0 = shard_prepare(shards[1], "t", cross.subops[1].subop, ref.prepare_requests("t", 1), ref.keys, 2)
    rc_apply(ref, q0, shards[1].keys, 2)
    q1 = shard_prepare(shards[0], "t", cross.subops[0].subop, ref.prepare_requests("t", 0), ref.keys, 2)
    assert q1.verdict is Verdict.NOT_OK
    assert rc_apply(ref, q1, shards[0].keys, 2).state is RefState.ABORTED
    for s in (0, 1):
        shard_finalize(shards[s], "t", ref.decisions("t"), ref.keys, 2)
    assert shards[0].state.balance(a) == 100 and shards[1].state.balance(b) == 100
    assert not shards[1].state.locks()


def test_byzantine_minority_cannot_flip_vote():
    ref, shards = system(byzantine={0: [10]})
    cross = split_transaction(pay("t", ACC[0][0], ACC[1][0], 5), S)
    begin_tx(ref, cross)
    q = shard_prepare(shards[0], "t", cross.subops[0].subop, ref.prepare_requests("t", 0), ref.keys, 2)
    assert q.verdict is Verdict.OK
    forged = VoteQuorum("t", 0, Verdict.NOT_OK, tuple(r for r in q.replies)[:1])
    with pytest.raises(InvalidQuorum):
        rc_apply(ref, forged, shards[0].keys, 2)


def test_relay_conserves_and_stalls_terminate():
    ref, shards = system()
    names = [a for s in range(S) for a in ACC[s][:3]]
    outcomes = []
    for i in range(12):
        src, dst = names[i % len(names)], names[(i * 5 + 1) % len(names)]
        if src == dst:
            continue
        outcomes.append(client_relay(pay("p%d" % i, src, dst, 40), ref, shards, S, stall_after=i % 3))
    total = sum(shards[shard_of(a.encode(), S)].state.balance(a) for s in ACC for a in ACC[s])
    assert total == 100 * sum(len(v) for v in ACC.values())
    assert all(o.status in ("Committed", "Aborted") for o in outcomes)
    assert any(o.redriven for o in outcomes)
    records = {k: ref.record(k) for k in ("p%d" % i for i in range(12)) if ref.record(k) is not None}
    report = check_atomicity(records, {s: [shards[s].state] for s in range(S)})
    assert report.ok


def test_atomicity_checker_flags_split_outcome():
    ref, shards = system()
    cross = split_transaction(pay("t", ACC[0][0], ACC[1][0], 5), S)
    begin_tx(ref, cross)
    for s in (0, 1):
        q = shard_prepare(shards[s], "t", cross.subops[s].subop, ref.prepare_requests("t", s), ref.keys, 2)
        rc_apply(ref, q, shards[s].keys, 2)
    shard_finalize(shards[0], "t", ref.decisions("t"), ref.keys, 2)
    report = check_atomicity({"t": ref.record("t")}, {0: [shards[0].state], 1: [shards[1].state]})
    assert not report.ok and report.unterminated and report.dangling_locks


@pytest.mark.parametrize("seed", [0, 4, 7, 11])
def test_simulated_traces_atomic_and_serializable(seed):
    out = run_xshard_case(seed, txs_per_client=4)
    assert out.ok, (out.atomicity, out.safety)


def test_simulated_stalling_client_terminates():
    out = run_xshard_case(3, cross=True, force_stalling=True, txs_per_client=4)
    assert out.stalling and out.atomicity.ok and out.atomicity.terminated == out.atomicity.begun
    assert not out.atomicity.dangling_locks
