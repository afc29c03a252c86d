"""Simulator: delivery mechanics, fault injection, determinism."""

import math

import pytest

from fastraft.core import ClusterConfig, InvalidConfigError
from fastraft.messages import ForwardOperation
from fastraft.sim import (
    AbortedRunError,
    CrashPlan,
    FixedDelay,
    Partition,
    PerLinkDelay,
    SimConfig,
    Simulation,
    UniformDelay,
    rng_stream,
)

CLUSTER = ClusterConfig(members=(0, 1, 2))


def make_sim(seed=1, protocol="raft", cluster=CLUSTER, **cfg):
    return Simulation(SimConfig(seed=seed, **cfg), cluster, protocol)


# ----------------------------------------------------------------------
# delivery mechanics


def test_fixed_delay_delivers_after_exactly_that_long():
    sim = make_sim(delay=FixedDelay(10.0))
    sim.send(0, 1, ForwardOperation(b"x"), now=5.0)
    eta = [t for t, _, kind, _ in sim._heap if kind == "deliver"]
    assert eta == [15.0]


def test_uniform_delay_stays_in_range():
    rng = rng_stream(7, "delay")
    delay = UniformDelay(2.0, 9.0)
    samples = [delay.sample(rng, 0, 1) for _ in range(500)]
    assert all(2.0 <= s < 9.0 for s in samples)
    assert max(samples) - min(samples) > 3.0


def test_per_link_delay_picks_the_link():
    delay = PerLinkDelay(links=(((0, 1), 30.0),), default=2.0)
    rng = rng_stream(7, "delay")
    assert delay.sample(rng, 0, 1) == 30.0
    assert delay.sample(rng, 1, 0) == 2.0


def test_loss_fraction_tracks_probability():
    sim = make_sim(seed=11, loss_probability=0.2)
    sim.run(10_000.0)
    total = sum(sim.message_counts.values())
    assert total > 200
    observed = sim.drops / total
    sigma = math.sqrt(0.2 * 0.8 / total)
    assert abs(observed - 0.2) < 3 * sigma + 0.01


def test_total_loss_never_elects():
    sim = make_sim(seed=3, loss_probability=1.0)
    sim.run(5000.0)
    assert sim.current_leader() is None
    assert sim.drops == sum(sim.message_counts.values())


def test_messages_to_crashed_node_are_dropped():
    sim = make_sim(seed=5, crashes=(CrashPlan(node=2, at=0.5),))
    sim.run(2000.0)
    assert 2 not in sim.nodes
    assert sim.drops > 0
    assert sim.current_leader() in (0, 1)


# ----------------------------------------------------------------------
# cluster behavior


def test_zero_loss_elects_one_stable_leader():
    sim = make_sim(seed=3)
    sim.run(5000.0)
    sim.finish()
    assert sim.current_leader() is not None
    assert len(sim.election_records) == 1
    terms = {n.current_term for n in sim.nodes.values()}
    assert len(terms) == 1


def test_leader_crash_triggers_reelection():
    probe = make_sim(seed=9)
    probe.run(2000.0)
    leader = probe.current_leader()
    assert leader is not None
    term = probe.nodes[leader].current_term

    sim = make_sim(seed=9, crashes=(CrashPlan(node=leader, at=2000.0),))
    sim.inject(3500.0, (leader + 1) % 3, b"cmd", "r1")
    sim.run(8000.0)
    sim.finish()
    successor = sim.current_leader()
    assert successor is not None and successor != leader
    assert sim.nodes[successor].current_term > term
    assert any(r.index for _, r in sim.commit_records if r.entry.command == b"cmd")


def test_partition_heals_and_logs_converge():
    part = Partition(start=800.0, end=2500.0, side_a=frozenset({0}), side_b=frozenset({1, 2}))
    sim = make_sim(seed=13, partitions=(part,))
    sim.inject(1200.0, 1, b"during", "r1")
    sim.run(8000.0)
    sim.finish()
    assert sim.halts == []
    prefixes = list(sim.committed_prefixes().values())
    shortest = min(len(p) for p in prefixes)
    assert shortest > 0
    for p in prefixes:
        for a, b in zip(p[:shortest], prefixes[0][:shortest]):
            assert a.same_value(b)


def test_restart_rejoins_with_persistent_state():
    sim = make_sim(seed=17, crashes=(CrashPlan(node=2, at=1500.0, restart_at=3000.0),))
    sim.inject(1000.0, 0, b"before", "r1")
    sim.inject(4000.0, 0, b"after", "r2")
    sim.run(9000.0)
    sim.finish()
    assert sim.nodes[2].store is sim.stores[2]
    leader = sim.current_leader()
    assert leader is not None
    lead_prefix = sim.nodes[leader].committed_prefix()
    follow_prefix = sim.nodes[2].committed_prefix()
    assert len(follow_prefix) >= 2
    for a, b in zip(follow_prefix, lead_prefix):
        assert a.same_value(b)


def test_fastraft_runs_and_commits():
    sim = make_sim(seed=21, protocol="fastraft")
    sim.inject(1500.0, 1, b"cmd", "r1")
    sim.run(6000.0)
    sim.finish()
    assert sim.halts == []
    assert any(r.entry.command == b"cmd" for _, r in sim.commit_records)


# ----------------------------------------------------------------------
# determinism


def test_same_seed_reproduces_trace_and_state():
    def one():
        sim = Simulation(
            SimConfig(seed=42, loss_probability=0.05),
            CLUSTER,
            "fastraft",
            record_trace=True,
        )
        sim.inject(1000.0, 1, b"a", "r1")
        sim.inject(1200.0, 2, b"b", "r2")
        sim.run(6000.0)
        sim.finish()
        return sim

    first, second = one(), one()
    assert first.trace_hash() == second.trace_hash()
    assert first.trace_text() == second.trace_text()
    assert first.committed_prefixes() == second.committed_prefixes()


def test_different_seeds_diverge():
    hashes = set()
    for seed in (1, 2):
        sim = Simulation(SimConfig(seed=seed), CLUSTER, "raft", record_trace=True)
        sim.run(2000.0)
        hashes.add(sim.trace_hash())
    assert len(hashes) == 2


def test_rng_streams_are_independent():
    a = rng_stream(5, "loss")
    b = rng_stream(5, "delay")
    assert [a.random() for _ in range(4)] != [b.random() for _ in range(4)]
    again, fresh = rng_stream(5, "loss"), rng_stream(5, "loss")
    assert [again.random() for _ in range(4)] == [fresh.random() for _ in range(4)]


# ----------------------------------------------------------------------
# guard rails


def test_event_budget_aborts_runaway_run():
    sim = make_sim(seed=1, event_budget=50)
    with pytest.raises(AbortedRunError):
        sim.run(60_000.0)


def test_unknown_protocol_rejected():
    with pytest.raises(InvalidConfigError):
        Simulation(SimConfig(seed=1), CLUSTER, "paxos")


@pytest.mark.parametrize(
    "kwargs",
    [
        {"loss_probability": -0.1},
        {"loss_probability": 1.5},
        {"partitions": (Partition(10.0, 5.0, (0,), (1, 2)),)},
        {"partitions": (Partition(5.0, 10.0, (0, 1), (1, 2)),)},
        {"partitions": (Partition(5.0, 10.0, (), (1, 2)),)},
        {"crashes": (CrashPlan(0, at=10.0, restart_at=5.0),)},
        {"crashes": (CrashPlan(0, at=10.0), CrashPlan(0, at=12.0))},
        {"event_budget": 0},
    ],
)
def test_sim_config_validation(kwargs):
    with pytest.raises(InvalidConfigError):
        SimConfig(seed=1, **kwargs)
