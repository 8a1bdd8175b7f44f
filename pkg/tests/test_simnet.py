import json
import random

import pytest

from shardchain.consensus import ConsensusConfig, Variant
from shardchain.enclave import LogId, forge_attempt, verify_append_proof
from shardchain.simnet import (AdversarySpec, ConfigError, Crash, Drop, EquivocateSeq, Fixed, RegionMatrix,
                               SpecError, StallingClient, Uniform, delay_model_from_json, verify_trace_chain)
from shardchain.simnet.engine import Simulator
from shardchain.simnet.hosts import Client, Network
from shardchain.simnet.scenarios import (Cluster, SimConfig, epoch_transition_scenario, kv_workload,
                                         run_consensus_trace, run_rollback_trace, run_simulation)


def test_event_order_ties_broken_by_actor_then_insertion():
    sim = Simulator(0)
    seen = []
    sim.schedule(1.0, 2, seen.append, "b2")
    sim.schedule(1.0, 1, seen.append, "a1")
    sim.schedule(1.0, 1, seen.append, "a2")
    sim.schedule(0.5, 9, seen.append, "early")
    sim.run()
    assert seen == ["early", "a1", "a2", "b2"]


def test_clock_never_goes_back():
    sim = Simulator(0)
    times = []

    def tick(k):
        times.append(sim.now)
        if k:
            sim.after(random.Random(k).uniform(0, 1), None, tick, k - 1)
            sim.schedule(sim.now - 5, None, times.append, sim.now)  # past times clamp to now

    sim.schedule(0.0, None, tick, 20)
    sim.run()
    assert times == sorted(times)


def test_trace_chain_detects_edits():
    sim = Simulator(0)
    for i in range(5):
        sim.schedule(float(i), None, sim.record, "x", "tick", {"i": i})
    sim.run()
    lines = [json.loads(x) for x in sim.trace.to_jsonl().splitlines()]
    assert verify_trace_chain(lines) == (True, None)
    lines[2]["payload"]["i"] = 99
    assert verify_trace_chain(lines) == (False, 2)
    assert verify_trace_chain(lines[:2] + lines[3:])[0] is False


def test_same_seed_same_trace():
    a = run_consensus_trace(Variant.AHL, 3, "drop", requests=10)
    b = run_consensus_trace(Variant.AHL, 3, "drop", requests=10)
    c = run_consensus_trace(Variant.AHL, 4, "drop", requests=10)
    assert a.trace_digest == b.trace_digest and a.metrics == b.metrics
    assert a.trace_digest != c.trace_digest


def test_region_matrix_table_value():
    rm = RegionMatrix({0: "asia-southeast1-b", 1: "europe-west1-b"})
    assert rm.delay(0, 1, random.Random(0)) == pytest.approx(0.2888)
    assert all(x >= 0 for row in rm.table_ms for x in row)


def test_delay_models_json_round_trip():
    for m in (Fixed(0.01), Uniform(0.001, 0.004), RegionMatrix({3: "us-east1-b"}, 0.001)):
        assert delay_model_from_json(m.to_json()).to_json() == m.to_json()


def test_sim_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(duration=0).validate()
    with pytest.raises(ConfigError):
        SimConfig(loss=1.0).validate()
    cfg = SimConfig(seed=4, duration=9.0)
    assert SimConfig.from_json(cfg.to_json()).to_json() == cfg.to_json()


def test_adversary_spec_validation():
    AdversarySpec({1}, {1: (Crash(0.5),), "c": (StallingClient(),)}).validate([0, 1, 2], ["c"], max_byzantine=1)
    with pytest.raises(SpecError):
        AdversarySpec({1}, {2: (Crash(0.5),)}).validate([0, 1, 2])
    with pytest.raises(SpecError):
        AdversarySpec({1, 2}, {}).validate([0, 1, 2], max_byzantine=1)
    with pytest.raises(SpecError):
        AdversarySpec(set(), {0: (StallingClient(),)}).validate([0, 1], ["c"])
    with pytest.raises(SpecError):
        AdversarySpec({0, 1}, {}).validate([0, 1, 2, 3], committees=[[0, 1], [2, 3]], f=1)
    with pytest.raises(SpecError):
        Drop(1.5)


def test_leader_drop_all_triggers_view_change():
    def topology(sim, net):
        cfg = ConsensusConfig(Variant.AHL, 3, 1, batch_size=1, batch_timeout=0.01, K=8, L=32,
                              request_timeout=0.5, view_change_timeout=0.5)
        cluster = Cluster(sim, net, cfg, [0, 1, 2], seed=1)
        client = Client(sim, net, "client", [0, 1, 2], 2, kv_workload("client", random.Random(1), limit=3),
                        mode="open", rate=50, retry=1.0, entry=1)
        cluster.start()
        return lambda: client.exhausted and not client.outstanding

    adv = AdversarySpec({0}, {0: (Drop(1.0),)})
    trace, metrics = run_simulation(SimConfig(seed=1, adversary=adv, duration=30.0), topology)
    vcs = trace.of_kind("view_change")
    assert vcs and metrics.view_changes >= 1
    assert metrics.committed == 3
    assert min(r.time for r in vcs) <= 0.5 * 2 + 1.0 + 0.1


def test_enclave_proofs_cannot_be_forged_in_simulation():
    out = run_consensus_trace(Variant.AHLPlus, 2, "equivocate", f=1, requests=8)
    assert out.valid_equivocations == 0 and out.safe


def test_forgery_attempt_fails():
    from shardchain.enclave import Enclave

    e = Enclave(0, 1)
    p = e.log_append(LogId.PREPARE, 0, 1, b"\x01" * 32)
    assert not verify_append_proof(forge_attempt(p, b"\x02" * 32), e.public_key)
    assert not hasattr(e, "private_key")


@pytest.mark.parametrize("seed", range(4))
def test_rollback_recovery(seed):
    out = run_rollback_trace(seed)
    assert out.ok, out


def test_transition_batched_vs_naive():
    batched = epoch_transition_scenario(seed=0, n=8, mode="batched", baseline=4.0, tail=3.0)
    naive = epoch_transition_scenario(seed=0, n=8, mode="naive", baseline=4.0, tail=3.0)
    assert batched.B <= batched.f
    assert batched.zero_windows == 0 and batched.transition_min >= 0.5 * batched.baseline_median
    assert naive.zero_windows >= 1


def test_transition_batch_larger_than_f_stalls():
    out = epoch_transition_scenario(seed=1, n=5, f=2, B=3, mode="batched", baseline=3.0, tail=3.0)
    assert out.zero_windows >= 1


def test_crash_after_start_is_silent():
    out = run_consensus_trace(Variant.HL, 6, "crash", f=1, requests=10)
    assert out.safe and out.executed_all


def test_equivocate_behavior_spec_is_node_only():
    with pytest.raises(SpecError):
        AdversarySpec(set(), {"client": (EquivocateSeq(),)}).validate([0, 1, 2], ["client"])
