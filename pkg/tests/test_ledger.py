import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardchain.ledger import (AbortPhaseOp, CommitPhaseOp, KvUpdate, PreparePhaseOp, ReceiptStatus,
                               SmallBankPayment, SubOp, Transaction, UnknownPreparedTx, apply_block, decode_int,
                               decode_transaction, encode_int, encode_transaction, execute_transaction, genesis,
                               lock_key, make_block, replay, shard_of, state_digest, state_from_json, state_to_json,
                               verify_chain, LedgerState)

EMPTY_DIGEST = "78d2b7c37bb882ef6b6655f11cbc5fbc70299b958e36da0e4ece2747a970882b"


def pay(txid, a, b, amount):
    return Transaction(txid, SmallBankPayment(a.encode(), b.encode(), amount), "c")


def test_payment_commits():
    s, r = execute_transaction(genesis({"a": 50, "b": 0}), pay("t1", "a", "b", 10))
    assert r.status is ReceiptStatus.COMMITTED
    assert (s.balance("a"), s.balance("b")) == (40, 10)


def test_overdraft_aborts_without_effect():
    g = genesis({"a": 50, "b": 0})
    s, r = execute_transaction(g, pay("t1", "a", "b", 100))
    assert r.status is ReceiptStatus.ABORTED
    assert dict(s.kv) == dict(g.kv)


def test_zero_amount_commits():
    _, r = execute_transaction(genesis({"a": 5, "b": 0}), pay("t0", "a", "b", 0))
    assert r.status is ReceiptStatus.COMMITTED


def test_prepare_on_locked_key_refused():
    g = genesis({"a": 50})
    s1, r1 = execute_transaction(g, Transaction("p1", PreparePhaseOp("x1", SubOp(deltas=((b"a", -5),)))))
    assert r1.status is ReceiptStatus.PREPARE_OK and s1.locked(b"a")
    s2, r2 = execute_transaction(s1, Transaction("p2", PreparePhaseOp("x2", SubOp(deltas=((b"a", 1),)))))
    assert r2.status is ReceiptStatus.PREPARE_NOT_OK
    assert dict(s2.kv) == dict(s1.kv)


def test_lock_key_layout():
    assert lock_key(b"acc") == b"L_acc"


def test_commit_applies_shadow_writes_and_releases():
    g = genesis({"a": 50, "b": 1})
    s, _ = execute_transaction(g, Transaction("p", PreparePhaseOp("x", SubOp(deltas=((b"a", -20), (b"b", 20))))))
    assert s.balance("a") == 50  # nothing applied in place before commit
    s, r = execute_transaction(s, Transaction("c", CommitPhaseOp("x")))
    assert r.status is ReceiptStatus.COMMITTED
    assert (s.balance("a"), s.balance("b")) == (30, 21)
    assert s.locks() == []


def test_commit_without_prepare_raises():
    with pytest.raises(UnknownPreparedTx):
        execute_transaction(genesis({"a": 1}), Transaction("c", CommitPhaseOp("ghost")))


def test_abort_tombstone_refuses_late_prepare():
    s, r = execute_transaction(genesis({"a": 9}), Transaction("ab", AbortPhaseOp("x")))
    assert r.status is ReceiptStatus.ABORTED
    s, r = execute_transaction(s, Transaction("p", PreparePhaseOp("x", SubOp(deltas=((b"a", -1),)))))
    assert r.status is ReceiptStatus.PREPARE_NOT_OK
    assert s.locks() == []


def test_empty_digest_is_frozen():
    oracle = hashlib.sha256(b"height:0\n" + b"\ntxlog\n").hexdigest()
    assert oracle == EMPTY_DIGEST
    assert state_digest(LedgerState()).hex() == EMPTY_DIGEST


def test_digest_distinguishes_values():
    assert state_digest(genesis({"a": 1})) != state_digest(genesis({"a": 2}))


@given(st.dictionaries(st.binary(min_size=1, max_size=6), st.binary(max_size=6), max_size=12), st.randoms())
def test_digest_independent_of_insertion_order(kv, rnd):
    items = list(kv.items())
    rnd.shuffle(items)
    assert state_digest(LedgerState(dict(items))) == state_digest(LedgerState(kv))


def test_shard_of_is_stable_and_in_range():
    assert shard_of(b"acc00001", 4) == shard_of(b"acc00001", 4)
    assert all(0 <= shard_of(b"k%d" % i, 7) < 7 for i in range(200))


def test_int_encoding_round_trip():
    for v in (0, 1, -1, 2**63 - 1, -(2**63)):
        assert decode_int(encode_int(v)) == v


accounts = st.sampled_from(["a", "b", "c", "d"])
payments = st.lists(st.tuples(accounts, accounts, st.integers(0, 60)), max_size=30)


@given(payments)
def test_payments_conserve_total(seq):
    s = genesis({"a": 100, "b": 50, "c": 0, "d": 7})
    total = 157
    for i, (a, b, amt) in enumerate(seq):
        if a == b:
            continue
        s, _ = execute_transaction(s, pay("t%d" % i, a, b, amt))
    assert sum(s.balance(x) for x in "abcd") == total
    assert all(s.balance(x) >= 0 for x in "abcd")


@given(st.lists(st.tuples(accounts, st.integers(-30, 30)), min_size=1, max_size=4, unique_by=lambda t: t[0]))
def test_prepare_then_abort_is_neutral(deltas):
    g = genesis({"a": 10, "b": 10, "c": 10, "d": 10})
    sub = SubOp(deltas=tuple((k.encode(), d) for k, d in deltas))
    s, _ = execute_transaction(g, Transaction("p", PreparePhaseOp("x", sub)))
    s, r = execute_transaction(s, Transaction("a", AbortPhaseOp("x")))
    assert r.status is ReceiptStatus.ABORTED
    assert dict(s.kv) == dict(g.kv)


@given(st.sets(accounts, min_size=1), st.sets(accounts, min_size=1))
def test_lock_exclusivity(k1, k2):
    g = genesis({"a": 10, "b": 10, "c": 10, "d": 10})
    op = lambda ks: SubOp(deltas=tuple((k.encode(), 1) for k in sorted(ks)))
    s, r1 = execute_transaction(g, Transaction("p1", PreparePhaseOp("x1", op(k1))))
    s, r2 = execute_transaction(s, Transaction("p2", PreparePhaseOp("x2", op(k2))))
    both = r1.status is ReceiptStatus.PREPARE_OK and r2.status is ReceiptStatus.PREPARE_OK
    assert not (both and k1 & k2)


@given(st.lists(st.tuples(accounts, accounts, st.integers(0, 30)), min_size=1, max_size=20), st.integers(1, 5))
@settings(max_examples=40)
def test_replay_reproduces_state(seq, per_block):
    g = genesis({"a": 40, "b": 40, "c": 40, "d": 40})
    txs = [pay("t%d" % i, a, b, amt) for i, (a, b, amt) in enumerate(seq) if a != b]
    blocks, s, parent = [], g, b"\x00" * 32
    for i in range(0, len(txs), per_block):
        blk = make_block(len(blocks) + 1, parent, txs[i:i + per_block])
        s, _ = apply_block(s, blk)
        blocks.append(blk)
        parent = blk.digest
    assert verify_chain(blocks)
    assert state_digest(replay(g, blocks)) == state_digest(s)


def test_block_skips_already_applied_txid():
    g = genesis({"a": 50, "b": 0})
    b1 = make_block(1, b"\x00" * 32, [pay("t1", "a", "b", 10)])
    b2 = make_block(2, b1.digest, [pay("t1", "a", "b", 10)])
    s, _ = apply_block(g, b1)
    s, _ = apply_block(s, b2)
    assert s.balance("a") == 40 and s.height == 2


def test_serialization_round_trips():
    tx = Transaction("p", PreparePhaseOp("x", SubOp(writes=((b"k", b"v"),), deltas=((b"a", -3),))), "cl")
    assert decode_transaction(encode_transaction(tx)) == tx
    kv_tx = Transaction("k", KvUpdate(((b"k1", b"1"), (b"k2", b"2"))))
    assert decode_transaction(encode_transaction(kv_tx)) == kv_tx
    s, _ = execute_transaction(genesis({"a": 5}), tx)
    assert state_digest(state_from_json(state_to_json(s))) == state_digest(s)
