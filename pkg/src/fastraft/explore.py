"""Bounded schedule exploration for safety checking.

Unlike the simulator, which samples one schedule per seed, the explorer
enumerates schedules: at every step it may deliver or drop the head of
any (sender, receiver) channel, force a node's timer, or inject the
next scripted command.  Channels are FIFO, which prunes reorderings the
network could produce but keeps the state space tractable; the fuzzer
covers reordering via randomized delays.

Violations are judged against run history, not just current state:
leadership and committed choices are accumulated along each path so a
leader that stepped down or a truncated commit still counts.  Nodes
never read a wall clock, so exploration runs at a frozen now=0 and
timers fire only when the explorer forces them (natural deadlines are
all positive and never reached).
"""

from __future__ import annotations

import random
from copy import deepcopy
from dataclasses import dataclass

from .core import ClusterConfig
from .fast import FastRaftNode
from .messages import Message, to_wire
from .node import CLIENT, RaftNode, Role

Action = tuple
Script = tuple[tuple[int, bytes], ...]

PROTOCOLS = {"raft": RaftNode, "fastraft": FastRaftNode}


@dataclass(frozen=True, slots=True)
class Violation:
    kind: str
    detail: str
    schedule: tuple[str, ...]


@dataclass(slots=True)
class ExploreResult:
    states_visited: int
    violations: list[Violation]
    truncated: bool

    @property
    def ok(self) -> bool:
        return not self.violations


def _node_class(protocol) -> type[RaftNode]:
    if isinstance(protocol, str):
        return PROTOCOLS[protocol]
    return protocol


def _explore_config(members: int) -> ClusterConfig:
    return ClusterConfig(tuple(range(members)))


class _State:
    """One point in the schedule tree; cheap to copy, hashable by key()."""

    def __init__(self, node_class: type[RaftNode], members: int, script: Script) -> None:
        config = _explore_config(members)
        self.nodes = {
            m: node_class(m, config, rng=random.Random(m), now=0.0)
            for m in config.members
        }
        self.channels: dict[tuple[int, int], tuple[Message, ...]] = {}
        self.script = script
        self.script_pos = 0
        self.drops_left = 0
        self.timeouts_left = 0
        self.led: frozenset[tuple[int, int]] = frozenset()
        self.chosen: dict[int, tuple] = {}
        self.command_slots: dict[bytes, int] = {}
        self.trail: tuple[str, ...] = ()

    def copy(self) -> _State:
        twin = object.__new__(_State)
        twin.nodes = deepcopy(self.nodes)
        twin.channels = dict(self.channels)
        twin.script = self.script
        twin.script_pos = self.script_pos
        twin.drops_left = self.drops_left
        twin.timeouts_left = self.timeouts_left
        twin.led = self.led
        twin.chosen = dict(self.chosen)
        twin.command_slots = dict(self.command_slots)
        twin.trail = self.trail
        return twin

    def key(self) -> tuple:
        return (
            tuple(self.nodes[m].state_key() for m in sorted(self.nodes)),
            tuple(
                (s, d, tuple(to_wire(m) for m in msgs))
                for (s, d), msgs in sorted(self.channels.items())
                if msgs
            ),
            self.script_pos,
            self.drops_left,
            self.timeouts_left,
            self.led,
            tuple(sorted(self.chosen.items())),
            tuple(sorted(self.command_slots.items())),
        )

    # ------------------------------------------------------------------

    def enabled_actions(self) -> list[Action]:
        actions: list[Action] = []
        if self.script_pos < len(self.script):
            actions.append(("inject",))
        for (s, d), msgs in sorted(self.channels.items()):
            if msgs:
                actions.append(("deliver", s, d))
                if self.drops_left > 0:
                    actions.append(("drop", s, d))
        if self.timeouts_left > 0:
            for m in sorted(self.nodes):
                actions.append(("timeout", m))
        return actions

    def apply(self, action: Action) -> list[Violation]:
        label = " ".join(str(p) for p in action)
        self.trail = self.trail + (label,)
        kind = action[0]
        if kind == "deliver":
            _, s, d = action
            msgs = self.channels[(s, d)]
            self.channels[(s, d)] = msgs[1:]
            outs = self.nodes[d].handle(s, msgs[0], 0.0)
            self._transmit(d, outs)
        elif kind == "drop":
            _, s, d = action
            self.channels[(s, d)] = self.channels[(s, d)][1:]
            self.drops_left -= 1
        elif kind == "timeout":
            _, m = action
            node = self.nodes[m]
            if node.role is Role.LEADER:
                node.heartbeat_deadline = 0.0
            else:
                node.election_deadline = 0.0
            self.timeouts_left -= 1
            self._transmit(m, node.tick(0.0))
        elif kind == "inject":
            target, command = self.script[self.script_pos]
            self.script_pos += 1
            request_id = f"x{self.script_pos}"
            outs = self.nodes[target].client_apply(command, request_id, 0.0)
            self._transmit(target, outs)
        else:
            raise ValueError(f"unknown action {action!r}")
        return self._check()

    def _transmit(self, frm: int, outs) -> None:
        for dst, message in outs:
            if dst == CLIENT:
                continue
            channel = (frm, dst)
            self.channels[channel] = self.channels.get(channel, ()) + (message,)

    # ------------------------------------------------------------------

    def _check(self) -> list[Violation]:
        found: list[Violation] = []
        for node in self.nodes.values():
            if node.halted is not None:
                found.append(Violation("halt", f"node {node.id}: {node.halted}", self.trail))
        led = set(self.led)
        for node in self.nodes.values():
            if node.role is Role.LEADER:
                led.add((node.current_term, node.id))
        by_term: dict[int, set[int]] = {}
        for term, node_id in led:
            by_term.setdefault(term, set()).add(node_id)
        for term, ids in by_term.items():
            if len(ids) > 1:
                found.append(
                    Violation("election-safety", f"term {term} led by {sorted(ids)}", self.trail)
                )
        self.led = frozenset(led)
        for node in self.nodes.values():
            for index in range(1, node.commit_index + 1):
                key = node.log[index].key()
                other = self.chosen.setdefault(index, key)
                if other != key:
                    found.append(
                        Violation(
                            "commit-agreement",
                            f"index {index} committed as both {other} and {key}",
                            self.trail,
                        )
                    )
                command = node.log[index].command
                if command:
                    slot = self.command_slots.setdefault(command, index)
                    if slot != index:
                        found.append(
                            Violation(
                                "exactly-once",
                                f"command {command!r} committed at {slot} and {index}",
                                self.trail,
                            )
                        )
        return found


def explore(
    protocol,
    members: int,
    script: Script,
    *,
    max_actions: int = 8,
    drop_budget: int = 0,
    timeout_budget: int = 3,
    max_states: int = 200_000,
    stop_on_violation: bool = True,
) -> ExploreResult:
    """Depth-first enumeration of schedules up to max_actions long."""
    root = _State(_node_class(protocol), members, script)
    root.drops_left = drop_budget
    root.timeouts_left = timeout_budget
    seen: set = {root.key()}
    violations: list[Violation] = []
    visited = 1
    truncated = False
    stack: list[tuple[_State, int]] = [(root, 0)]
    while stack:
        state, depth = stack.pop()
        if depth >= max_actions:
            continue
        for action in state.enabled_actions():
            child = state.copy()
            found = child.apply(action)
            if found:
                violations += found
                if stop_on_violation:
                    return ExploreResult(visited, violations, truncated)
            key = child.key()
            if key in seen:
                continue
            seen.add(key)
            visited += 1
            if visited >= max_states:
                return ExploreResult(visited, violations, True)
            stack.append((child, depth + 1))
    return ExploreResult(visited, violations, truncated)


def run_schedule(
    protocol,
    members: int,
    script: Script,
    schedule: list[Action],
    *,
    drop_budget: int = 64,
    timeout_budget: int = 64,
) -> list[Violation]:
    """Apply one fixed schedule and report the violations it produces."""
    state = _State(_node_class(protocol), members, script)
    state.drops_left = drop_budget
    state.timeouts_left = timeout_budget
    violations: list[Violation] = []
    for action in schedule:
        violations += state.apply(action)
    return violations


def channel_heads(state_like) -> dict[tuple[int, int], str]:
    """Debug helper: variant name at the head of each nonempty channel."""
    return {
        channel: type(msgs[0]).__name__
        for channel, msgs in sorted(state_like.channels.items())
        if msgs
    }


def drain_schedule(
    protocol,
    members: int,
    script: Script,
    *,
    rounds: int = 200,
) -> tuple[_State, list[Violation]]:
    """Deliver everything in channel order until quiescent; no faults.

    A convenience for tests that want the happy path: inject all script
    commands up front, then alternate deliveries with leader timeouts so
    heartbeats propagate commit indexes.
    """
    state = _State(_node_class(protocol), members, script)
    state.timeouts_left = rounds
    violations: list[Violation] = []
    violations += state.apply(("timeout", 0))
    for _ in range(rounds):
        acted = False
        for action in state.enabled_actions():
            if action[0] in ("inject", "deliver"):
                violations += state.apply(action)
                acted = True
                break
        if acted:
            continue
        leaders = [m for m, n in state.nodes.items() if n.role is Role.LEADER]
        if leaders and state.timeouts_left > 0:
            violations += state.apply(("timeout", leaders[0]))
            if not any(state.channels.get(c) for c in state.channels):
                break
        else:
            break
    return state, violations
