import csv
import io

import pytest

from shardchain.bench.runner import (REPORT_COLUMNS, ShardConfig, consensus_bench, isolation_check, reports_csv,
                                     run_benchmark, scaling_sweep)
from shardchain.bench.serializability import split_payment_history
from shardchain.bench.workload import Benchmark, WorkloadSpec
from shardchain.simnet.network import Uniform
from shardchain.simnet.scenarios import SimConfig


@pytest.fixture(scope="module")
def small_report():
    cfg = SimConfig(seed=2, delay=Uniform(0.001, 0.005), duration=2.0)
    spec = WorkloadSpec(clients=4, theta=1.0, key_space=50, duration=2.0)
    rep, _ = run_benchmark(cfg, spec, ShardConfig(num_shards=2, batch_size=16))
    return rep


def test_every_issued_tx_accounted_for(small_report):
    r = small_report
    assert r.issued > 0 and r.accounting_ok
    assert r.committed > 0


def test_oracles_green(small_report):
    assert small_report.oracles == {"safety": True, "serializability": True, "atomicity": True,
                                    "conservation": True}
    assert small_report.green


def test_report_csv_schema(small_report):
    rows = list(csv.DictReader(io.StringIO(reports_csv([small_report]))))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert rows[0]["seed"] == "2" and rows[0]["benchmark"] == "SmallBank"


def test_same_seed_same_report():
    cfg = SimConfig(seed=5, delay=Uniform(0.001, 0.005), duration=1.0)
    spec = WorkloadSpec(Benchmark.KVSTORE, clients=2, key_space=40, duration=1.0)
    a, _ = run_benchmark(cfg, spec, ShardConfig(num_shards=2, batch_size=8))
    b, _ = run_benchmark(cfg, spec, ShardConfig(num_shards=2, batch_size=8))
    assert a.to_json() == b.to_json()


def test_two_shards_outrun_one():
    one, two = scaling_sweep((1, 2), duration=1.0)
    assert two.throughput > 1.5 * one.throughput
    assert one.green and two.green


def test_isolation_check_flags_split_interleaving():
    res = isolation_check(split_payment_history(), size=2)
    assert not res.serializable and not res.mismatches


def test_ahlplus_beats_ahl_under_full_queues():
    ahl = consensus_bench("AHL", n=17, duration=2.0)
    plus = consensus_bench("AHLPlus", n=17, duration=2.0)
    assert plus.throughput > ahl.throughput
    with pytest.raises(ValueError):
        consensus_bench("HL", n=17)
