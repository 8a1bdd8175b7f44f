import itertools
import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shardchain.enclave import Enclave
from shardchain.shardform import (Infeasible, InvalidParams, Move, ScheduleError, SizingQuery, TransitionSchedule,
                                  assign_committees, cross_shard_counts, cross_shard_counts_enumerated,
                                  cross_shard_monte_carlo, cross_shard_probability, faulty_committee_probability,
                                  faulty_committee_probability_exact, min_committee_size, reconfiguration_schedule,
                                  repeat_probability, replay_schedule, run_beacon_round,
                                  transition_failure_probability)


def enumerate_tail(N, F, n, f):
    """Fraction of n-subsets of [0, N) holding at least f of the first F (bad) nodes."""
    hits = total = 0
    for sub in itertools.combinations(range(N), n):
        total += 1
        if sum(1 for x in sub if x < F) >= f:
            hits += 1
    return Fraction(hits, total)


def test_tail_trivial_cases():
    assert faulty_committee_probability(50, 0, 10, 1) == 0.0
    assert faulty_committee_probability(50, 7, 10, 0) == pytest.approx(1.0, abs=1e-15)
    assert faulty_committee_probability_exact(10, 3, 4, 2) == Fraction(1, 3)


def test_tail_matches_enumeration_small_grid():
    for N in range(1, 9):
        for F in range(N + 1):
            for n in range(1, N + 1):
                for f in range(n + 1):
                    assert abs(faulty_committee_probability(N, F, n, f) - float(enumerate_tail(N, F, n, f))) < 1e-12


def test_tail_rejects_bad_params():
    with pytest.raises(InvalidParams):
        faulty_committee_probability(10, 11, 3, 1)
    with pytest.raises(InvalidParams):
        faulty_committee_probability(10, 2, 0, 1)


@given(st.integers(2, 60).flatmap(lambda N: st.tuples(st.just(N), st.integers(0, N - 1), st.integers(1, N),
                                                      st.integers(0, 30))))
def test_tail_monotone(params):
    N, F, n, f = params
    assert faulty_committee_probability(N, F + 1, n, f) >= faulty_committee_probability(N, F, n, f) - 1e-15
    assert faulty_committee_probability(N, F, n, f + 1) <= faulty_committee_probability(N, F, n, f) + 1e-15


def test_sizing_no_adversary():
    assert min_committee_size(SizingQuery(1000, 0.0)).n == 1
    assert min_committee_size(SizingQuery(1000, 0.0, "third")).n == 1


def test_sizing_eighth():
    assert 25 <= min_committee_size(SizingQuery(1000, 0.125)).n <= 30


def test_sizing_frozen_values():
    # exact hypergeometric tails; the finite population keeps N = 1000 below the large-N values
    assert min_committee_size(SizingQuery(1000, 0.25)).n == 73
    assert min_committee_size(SizingQuery(10000, 0.25)).n == 79


def test_sizing_third_resilience_large_network():
    assert min_committee_size(SizingQuery(10000, 0.25, "third")).n >= 600


def test_sizing_infeasible():
    with pytest.raises(Infeasible):
        min_committee_size(SizingQuery(20, 0.6))


def test_transition_bound():
    n = 80
    f = (n - 1) // 2
    assert transition_failure_probability(1000, 250, n, f + 1, 10, n) == faulty_committee_probability(1000, 250, n, f + 1)
    assert transition_failure_probability(1000, 0, n, f + 1, 10, 6) == 0.0
    single = faulty_committee_probability(1000, 250, n, f + 1)
    assert transition_failure_probability(1000, 250, n, f + 1, 10, 6) == pytest.approx(12 * single)


def test_repeat_probability():
    assert repeat_probability(0, 10) == 0.0
    assert repeat_probability(1, 2) == 0.25
    for N in (64, 256, 1024):
        assert abs(repeat_probability(math.log2(N), N) - math.exp(-1)) / math.exp(-1) < 0.01


def test_assignment_partitions_and_determinism():
    nodes = list(range(23))
    a = assign_committees(12345, nodes, 4)
    assert sorted(x for c in a.committees for x in c) == nodes
    sizes = [len(c) for c in a.committees]
    assert max(sizes) - min(sizes) <= 1
    assert a == assign_committees(12345, nodes, 4)
    assert a.to_json() == assign_committees(12345, nodes, 4).to_json()
    assert assign_committees(7, nodes, 1).committees == (tuple(assign_committees(7, nodes, 1).permutation),)
    with pytest.raises(InvalidParams):
        assign_committees(1, [1, 2], 3)


def test_assignment_cells_uniform():
    counts = [[0] * 4 for _ in range(20)]
    draws = 10_000
    rng = random.Random(11)
    for _ in range(draws):
        a = assign_committees(rng.getrandbits(256), range(20), 4)
        for c, members in enumerate(a.committees):
            for node in members:
                counts[node][c] += 1
    assert all(abs(x / draws - 0.25) <= 0.02 for row in counts for x in row)


def test_schedule_trivial_cases():
    a = assign_committees(1, range(12), 3)
    assert reconfiguration_schedule(a, a, 2).batches == ()
    b = assign_committees(2, range(12), 3, epoch=1)
    s = reconfiguration_schedule(a, b, 100)
    assert len(s.batches) == 1 and replay_schedule(a, b, s) <= 100


def test_schedule_two_committees_of_33():
    a = assign_committees(5, range(66), 2)
    b = assign_committees(6, range(66), 2, epoch=1)
    B = int(math.log2(33))
    s = reconfiguration_schedule(a, b, B)
    assert all(len(batch) <= B for batch in s.batches)
    assert replay_schedule(a, b, s) <= B
    assert {m.node for m in s.moves} == {x for x in range(66) if a.committee_of(x) != b.committee_of(x)}
    assert s == reconfiguration_schedule(a, b, B)


@given(st.integers(0, 2**64), st.integers(0, 2**64), st.integers(6, 40), st.integers(1, 4), st.integers(1, 8))
@settings(max_examples=60)
def test_schedule_replay_property(r1, r2, N, k, B):
    k = min(k, N)
    a = assign_committees(r1, range(N), k)
    b = assign_committees(r2, range(N), k, epoch=1)
    assert replay_schedule(a, b, reconfiguration_schedule(a, b, B)) <= B


def test_replay_catches_bad_schedules():
    a = assign_committees(1, range(8), 2)
    b = assign_committees(2, range(8), 2, epoch=1)
    moves = reconfiguration_schedule(a, b, 8).moves
    assert len(moves) >= 2
    with pytest.raises(ScheduleError):
        replay_schedule(a, b, TransitionSchedule((0, 1), (tuple(moves),), 1))
    with pytest.raises(ScheduleError):
        replay_schedule(a, b, TransitionSchedule((0, 1), (), 1))
    with pytest.raises(ScheduleError):
        replay_schedule(a, b, TransitionSchedule((0, 1), ((Move(moves[0].node, moves[0].dst, moves[0].src),),), 1))


def test_cross_shard_examples():
    assert cross_shard_probability(5, 1) == {1: 1.0}
    assert cross_shard_probability(2, 2, exact=True) == {1: Fraction(1, 2), 2: Fraction(1, 2)}
    assert cross_shard_probability(3, 4, exact=True)[3] == Fraction(3, 8)


def test_cross_shard_closed_form_matches_enumeration():
    for d in range(1, 7):
        for k in range(1, 7):
            assert cross_shard_counts(d, k) == cross_shard_counts_enumerated(d, k)
            assert abs(sum(cross_shard_probability(d, k).values()) - 1) < 1e-9


def test_cross_shard_large_uses_closed_form():
    p = cross_shard_probability(30, 64)
    assert abs(sum(p.values()) - 1) < 1e-9


def test_cross_shard_monte_carlo_agrees():
    exact = cross_shard_probability(3, 4)
    mc = cross_shard_monte_carlo(3, 4, 200_000, seed=1)
    for x, p in exact.items():
        assert abs(mc[x] - p) <= 3 * math.sqrt(p * (1 - p) / 200_000) + 1e-12


class Rigged(random.Random):
    """``random()`` replies from a script so the beacon filter outcome is chosen by the test."""

    script: list = []

    def random(self):
        return self.script.pop(0) if self.script else 0.99


def beacon_nodes(scripts):
    nodes = []
    for i, s in enumerate(scripts):
        rng = Rigged(i)
        rng.script = list(s)
        nodes.append(Enclave(i, b"bcn", rng=rng))
    return nodes


def test_beacon_unique_certificate_locked_by_all():
    nodes = beacon_nodes([[0.9], [0.0], [0.9], [0.9]])
    out = run_beacon_round(nodes, delta=1.0, l=2)
    assert out.issuer == 1 and out.agreed and len(out.locked) == 4
    assert out.epoch == 0 and out.repeats == 0


def test_beacon_forced_repeat():
    nodes = beacon_nodes([[0.9, 0.9], [0.9, 0.0], [0.9, 0.9]])
    out = run_beacon_round(nodes, delta=1.0, epoch=3, l=2)
    assert out.epoch == 4 and out.repeats == 1 and out.issuer == 1


def test_beacon_selective_sender_with_rebroadcast():
    nodes = [Enclave(i, b"sel") for i in range(6)]
    probe = [Enclave(i, b"sel") for i in range(6)]
    lowest = min((c.rnd, c.node_id) for c in (e.beacon_invoke(0, 0) for e in probe))[1]
    targets = [x for x in range(6) if x != lowest][:2]
    out = run_beacon_round(nodes, delta=1.0, l=0, delay=lambda a, b: 0.4, selective={lowest: targets})
    assert out.agreed and out.issuer == lowest


def test_beacon_selective_sender_without_rebroadcast_disagrees():
    nodes = [Enclave(i, b"sel") for i in range(6)]
    probe = [Enclave(i, b"sel") for i in range(6)]
    lowest = min((c.rnd, c.node_id) for c in (e.beacon_invoke(0, 0) for e in probe))[1]
    targets = [x for x in range(6) if x != lowest][:2]
    out = run_beacon_round(nodes, delta=1.0, l=0, selective={lowest: targets}, rebroadcast=False)
    assert not out.agreed


def test_beacon_delay_bound_enforced():
    with pytest.raises(InvalidParams):
        run_beacon_round([Enclave(0, 1), Enclave(1, 1)], delta=1.0, l=0, delay=lambda a, b: 2.0)


def test_beacon_lock_is_honest_value():
    nodes = [Enclave(i, b"vals") for i in range(8)]
    out = run_beacon_round(nodes, delta=1.0, l=1)
    produced = {(c.rnd, c.node_id) for c in out.certs}
    assert set(out.locked.values()) <= produced
    assert len({c.node_id for c in out.certs if c.epoch == out.epoch}) == len([c for c in out.certs if c.epoch == out.epoch])
