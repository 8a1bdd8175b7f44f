import math
import random

import pytest
from scipy import stats

from shardchain.bench.workload import (Benchmark, SpecError, WorkloadSpec, ZipfSampler, cross_only,
                                       generate_workload, shard_keys)
from shardchain.ledger import KvUpdate, SmallBankPayment


def test_uniform_keys_pass_chi_squared():
    z = ZipfSampler(1000, 0.0, random.Random(3))
    counts = [0] * 1000
    for _ in range(100_000):
        counts[z.sample()] += 1
    _, p = stats.chisquare(counts)
    assert p > 0.01


def test_zipf_top_key_frequency():
    n, theta, draws = 1000, 2.0, 100_000
    z = ZipfSampler(n, theta, random.Random(5))
    expected = 1 / sum(1 / k ** theta for k in range(1, n + 1))
    assert z.pmf(0) == pytest.approx(expected)
    hits = sum(1 for _ in range(draws) if z.sample() == 0)
    sigma = math.sqrt(expected * (1 - expected) / draws)
    assert abs(hits / draws - expected) <= 3 * sigma


def test_same_seed_same_stream():
    spec = WorkloadSpec(Benchmark.KVSTORE, theta=1.0)
    a = list(generate_workload(spec, 7, limit=50))
    b = list(generate_workload(spec, 7, limit=50))
    c = list(generate_workload(spec, 8, limit=50))
    assert a == b and a != c


def test_kvstore_updates_three_distinct_keys():
    spec = WorkloadSpec(Benchmark.KVSTORE, key_space=10, theta=2.0)
    for tx in generate_workload(spec, 1, limit=200):
        assert isinstance(tx.payload, KvUpdate)
        keys = [k for k, _ in tx.payload.writes]
        assert len(keys) == 3 == len(set(keys))


def test_smallbank_payments_between_two_accounts():
    spec = WorkloadSpec(Benchmark.SMALLBANK, max_amount=5)
    for tx in generate_workload(spec, 2, limit=100):
        p = tx.payload
        assert isinstance(p, SmallBankPayment) and p.src != p.dst and 1 <= p.amount <= 5


def test_restricted_stream_stays_on_one_shard():
    spec = WorkloadSpec(Benchmark.SMALLBANK, key_space=200)
    own = shard_keys(spec, 1, 4)
    for tx in generate_workload(spec, 3, restrict=own, limit=100):
        assert not tx.is_cross_shard(4)
    crossing = list(cross_only(generate_workload(spec, 3, limit=200), 4))
    assert crossing and all(tx.is_cross_shard(4) for tx in crossing)


@pytest.mark.parametrize("kw", [dict(mode="bursty"), dict(theta=-1.0), dict(key_space=1), dict(duration=0),
                                dict(updates_per_tx=0), dict(benchmark="TPC-C")])
def test_bad_specs_rejected(kw):
    with pytest.raises((SpecError, ValueError)):
        WorkloadSpec(**kw).validate()
