"""Bounded schedule exploration and directed schedule replay."""

import pytest

from fastraft import explore
from fastraft.core import ClusterConfig
from fastraft.explore import (
    ExploreResult,
    _State,
    _node_class,
    channel_heads,
    drain_schedule,
    explore as search,
    run_schedule,
)

ONE = ((1, b"A"),)
TWO = ((1, b"A"), (2, b"B"))


def parse_schedule(labels):
    """Turn a violation's trail back into replayable actions."""
    actions = []
    for label in labels:
        parts = label.split()
        actions.append(tuple([parts[0]] + [int(p) for p in parts[1:]]))
    return actions


class Driver:
    """Apply actions to a private state while recording the schedule."""

    def __init__(self, protocol, members, script):
        self.state = _State(_node_class(protocol), members, script)
        self.state.timeouts_left = 8
        self.schedule = []
        self.violations = []

    def act(self, action):
        self.schedule.append(action)
        self.violations += self.state.apply(action)

    def pump(self, limit=60):
        for _ in range(limit):
            delivers = [a for a in self.state.enabled_actions() if a[0] == "deliver"]
            if not delivers:
                return
            self.act(delivers[0])


@pytest.mark.parametrize("protocol", ["raft", "fastraft"])
def test_bounded_search_finds_no_violations(protocol):
    result = search(protocol, 3, ONE, max_actions=6, drop_budget=0, timeout_budget=2)
    assert result.ok
    assert not result.truncated
    assert result.states_visited > 400


@pytest.mark.parametrize("protocol", ["raft", "fastraft"])
def test_search_is_deterministic(protocol):
    first = search(protocol, 3, ONE, max_actions=5, timeout_budget=2)
    second = search(protocol, 3, ONE, max_actions=5, timeout_budget=2)
    assert first == second


def test_search_reports_truncation():
    result = search("raft", 3, ONE, max_actions=6, timeout_budget=2, max_states=10)
    assert result.truncated
    assert result.states_visited == 10


def test_drop_budget_widens_the_search():
    plain = search("raft", 3, (), max_actions=4, timeout_budget=1)
    lossy = search("raft", 3, (), max_actions=4, drop_budget=1, timeout_budget=1)
    assert lossy.ok
    assert lossy.states_visited > plain.states_visited


@pytest.mark.parametrize("protocol", ["raft", "fastraft"])
def test_drain_commits_every_command_once(protocol):
    state, violations = drain_schedule(protocol, 3, TWO)
    assert violations == []
    assert state.command_slots == {b"A": 2, b"B": 3}
    assert {n.commit_index for n in state.nodes.values()} == {3}
    logs = {tuple((i, e.command) for i, e in sorted(n.log.items())) for n in state.nodes.values()}
    assert len(logs) == 1


def test_channel_heads_names_pending_traffic():
    state = _State(_node_class("raft"), 3, ())
    state.timeouts_left = 1
    state.apply(("timeout", 0))
    assert channel_heads(state) == {(0, 1): "RequestVote", (0, 2): "RequestVote"}


def test_run_schedule_with_no_actions_is_clean():
    assert run_schedule("raft", 3, (), []) == []


def test_unknown_protocol_rejected():
    with pytest.raises(KeyError):
        search("paxos", 3, ())


def test_unknown_action_rejected():
    state = _State(_node_class("raft"), 3, ())
    with pytest.raises(ValueError, match="unknown action"):
        state.apply(("reorder", 0, 1))


def test_broken_classic_quorum_is_caught(monkeypatch):
    """A majority of one lets rival candidates both win; search sees it."""
    monkeypatch.setattr(ClusterConfig, "classic_quorum", lambda self: 1)
    result = search("raft", 3, (), max_actions=2, timeout_budget=2)
    kinds = {v.kind for v in result.violations}
    assert "election-safety" in kinds

    replayed = run_schedule("raft", 3, (), parse_schedule(result.violations[0].schedule))
    assert {v.kind for v in replayed} & kinds


def test_broken_fast_quorum_is_caught(monkeypatch):
    """Fast quorum shrunk to a bare majority breaks recovery's tiebreak.

    Leader 0 pronounces B at index 2 off two accepts.  Node 1 then takes
    the term having seen neither the pronouncement nor B's proposal, and
    its recovery prefers its own rival A: with a proper ceil(3M/4) quorum
    a pronounced value always outranks rivals, with a bare majority it
    cannot be told apart from one.
    """
    monkeypatch.setattr(ClusterConfig, "fast_quorum", lambda self: 2)
    driver = Driver("fastraft", 3, TWO)

    # Elect node 0, then one heartbeat so every node learns commit 1.
    driver.act(("timeout", 0))
    driver.pump()
    driver.act(("timeout", 0))
    driver.pump()

    # Rival proposals for index 2; the leader hears only B's side.
    driver.act(("inject",))
    driver.act(("inject",))
    driver.act(("deliver", 2, 0))
    driver.act(("deliver", 2, 0))
    leader = driver.state.nodes[0]
    assert leader.commit_index == 2
    assert leader.log[2].command == b"B"
    assert driver.violations == []

    # Node 1 seizes the term before B replicates classically.
    driver.act(("timeout", 1))
    for channel in ((1, 2), (1, 2), (2, 1), (2, 1)):
        driver.act(("deliver",) + channel)
    for _ in range(12):
        for channel in ((1, 2), (2, 1)):
            if driver.state.channels.get(channel):
                driver.act(("deliver",) + channel)
                break
        else:
            break

    kinds = {v.kind for v in driver.violations}
    assert kinds == {"commit-agreement", "exactly-once"}

    replayed = run_schedule("fastraft", 3, TWO, driver.schedule)
    assert {v.kind for v in replayed} == kinds


def test_healthy_fast_quorum_survives_the_same_story():
    """The directed rival/takeover schedule is harmless on the real build.

    With fast_quorum back at ceil(3M/4) the leader cannot pronounce off
    two accepts, so the takeover finds only tentative rivals and the
    requeue path commits each command exactly once.
    """
    driver = Driver("fastraft", 3, TWO)
    driver.act(("timeout", 0))
    driver.pump()
    driver.act(("timeout", 0))
    driver.pump()
    driver.act(("inject",))
    driver.act(("inject",))
    driver.act(("deliver", 2, 0))
    driver.act(("deliver", 2, 0))
    assert driver.state.nodes[0].commit_index == 1

    driver.act(("timeout", 1))
    for _ in range(40):
        delivers = [a for a in driver.state.enabled_actions() if a[0] == "deliver"]
        if not delivers:
            break
        driver.act(delivers[0])
    assert driver.violations == []
    assert set(driver.state.command_slots) <= {b"A", b"B"}


def test_explore_result_ok_means_no_violations():
    assert ExploreResult(1, [], False).ok
    assert ExploreResult(1, [], True).ok
    bad = ExploreResult(1, [explore.Violation("halt", "node 0: x", ())], False)
    assert not bad.ok
