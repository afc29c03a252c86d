"""Seeded discrete-event network simulator for the consensus machines.

Events live in a single heap ordered by (time, insertion sequence), so a
given configuration and workload replays bit-identically.  Randomness is
split into named streams (loss, delay, per-node timeouts) derived from
the master seed by hashing, which keeps the streams independent of each
other and of call ordering elsewhere.

Time is simulated milliseconds.  Nodes are pure state machines; the
simulator owns delivery, loss, partitions, crash and restart schedules,
client injection, and the adaptive per-node timer events that replace a
global tick.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import random
from collections import Counter
from dataclasses import dataclass, field

from .core import ClusterConfig, InvalidConfigError, LogEntry, PersistentState
from .fast import FastRaftNode
from .messages import ClientApplyReply, Message, to_wire, variant_name
from .node import CLIENT, CommitRecord, RaftNode, Role


class AbortedRunError(RuntimeError):
    """Raised when a run exceeds its event budget."""


def rng_stream(seed: int, label: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


@dataclass(frozen=True, slots=True)
class FixedDelay:
    delay: float

    def sample(self, rng: random.Random, frm: int, to: int) -> float:
        return self.delay


@dataclass(frozen=True, slots=True)
class UniformDelay:
    low: float
    high: float

    def sample(self, rng: random.Random, frm: int, to: int) -> float:
        return rng.uniform(self.low, self.high)


@dataclass(frozen=True, slots=True)
class PerLinkDelay:
    links: tuple[tuple[tuple[int, int], float], ...]
    default: float = 1.0

    def sample(self, rng: random.Random, frm: int, to: int) -> float:
        for link, delay in self.links:
            if link == (frm, to):
                return delay
        return self.default


@dataclass(frozen=True, slots=True)
class Partition:
    start: float
    end: float
    side_a: frozenset[int]
    side_b: frozenset[int]

    def severs(self, frm: int, to: int, now: float) -> bool:
        if not self.start <= now < self.end:
            return False
        return (frm in self.side_a and to in self.side_b) or (
            frm in self.side_b and to in self.side_a
        )


@dataclass(frozen=True, slots=True)
class CrashPlan:
    node: int
    at: float
    restart_at: float | None = None


@dataclass(frozen=True, slots=True)
class SimConfig:
    seed: int
    loss_probability: float = 0.0
    delay: FixedDelay | UniformDelay | PerLinkDelay = UniformDelay(1.0, 5.0)
    partitions: tuple[Partition, ...] = ()
    crashes: tuple[CrashPlan, ...] = ()
    event_budget: int = 10_000_000

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_probability <= 1.0:
            raise InvalidConfigError(f"loss probability {self.loss_probability} outside [0, 1]")
        for part in self.partitions:
            if not part.side_a or not part.side_b or set(part.side_a) & set(part.side_b):
                raise InvalidConfigError("partition sides must be disjoint and non-empty")
            if not part.start < part.end:
                raise InvalidConfigError("partition window must be increasing")
        windows: dict[int, list[tuple[float, float]]] = {}
        for crash in self.crashes:
            end = crash.restart_at if crash.restart_at is not None else math.inf
            if not crash.at < end:
                raise InvalidConfigError("crash must precede its restart")
            for start, stop in windows.get(crash.node, []):
                if crash.at < stop and start < end:
                    raise InvalidConfigError(
                        f"overlapping crash windows for node {crash.node}"
                    )
            windows.setdefault(crash.node, []).append((crash.at, end))
        if self.event_budget < 1:
            raise InvalidConfigError("event budget must be positive")


@dataclass(slots=True)
class ClientOutcome:
    time: float
    node: int
    reply: ClientApplyReply


@dataclass(slots=True)
class Injection:
    time: float
    node: int
    command: bytes
    request_id: str


class Simulation:
    """One seeded cluster run."""

    def __init__(
        self,
        sim_config: SimConfig,
        cluster: ClusterConfig,
        protocol: str = "raft",
        *,
        record_trace: bool = False,
        persistence: bool = True,
    ) -> None:
        if protocol not in ("raft", "fastraft"):
            raise InvalidConfigError(f"unknown protocol {protocol!r}")
        self.sim_config = sim_config
        self.cluster = cluster
        self.protocol = protocol
        self.record_trace = record_trace
        self.persistence = persistence

        self._loss_rng = rng_stream(sim_config.seed, "loss")
        self._delay_rng = rng_stream(sim_config.seed, "delay")
        self._timeout_rngs = {
            m: rng_stream(sim_config.seed, f"timeout/{m}") for m in cluster.members
        }

        self._node_cls = FastRaftNode if protocol == "fastraft" else RaftNode
        self.stores: dict[int, PersistentState] = {m: PersistentState() for m in cluster.members}
        self.nodes: dict[int, RaftNode] = {}
        for m in cluster.members:
            self.nodes[m] = self._make_node(m, 0.0)

        self.now = 0.0
        self._heap: list[tuple] = []
        self._seq = 0
        self._timer_target: dict[int, float] = {}

        self.trace: list[str] = []
        self.message_counts: Counter[str] = Counter()
        self.drops = 0
        self.events_processed = 0
        self.client_replies: list[ClientOutcome] = []
        self.injections: list[Injection] = []
        self.dead_injections: set[str] = set()
        self.commit_records: list[tuple[int, CommitRecord]] = []
        self.election_records: list[tuple[int, int, float]] = []
        self.halts: list[tuple[int, str]] = []

        for crash in sim_config.crashes:
            self._push(crash.at, "crash", crash.node)
            if crash.restart_at is not None:
                self._push(crash.restart_at, "restart", crash.node)
        for m in cluster.members:
            self._arm_timer(m)

    # ------------------------------------------------------------------
    # construction helpers

    def _make_node(self, node_id: int, now: float) -> RaftNode:
        store = self.stores[node_id] if self.persistence else PersistentState()
        return self._node_cls(
            node_id,
            self.cluster,
            store=store,
            rng=self._timeout_rngs[node_id],
            now=now,
        )

    def _push(self, time: float, kind: str, *payload) -> None:
        heapq.heappush(self._heap, (time, self._seq, kind, payload))
        self._seq += 1

    # ------------------------------------------------------------------
    # network

    def send(self, frm: int, to: int, message: Message, now: float) -> None:
        """Apply loss, partitions, and delay to one transmission."""
        self.message_counts[variant_name(message)] += 1
        for part in self.sim_config.partitions:
            if part.severs(frm, to, now):
                self.drops += 1
                return
        if self.sim_config.loss_probability > 0.0:
            if self._loss_rng.random() < self.sim_config.loss_probability:
                self.drops += 1
                return
        if to not in self.nodes:
            self.drops += 1
            return
        delay = self.sim_config.delay.sample(self._delay_rng, frm, to)
        self._push(now + delay, "deliver", frm, to, message)

    def _dispatch(self, frm: int, outs, now: float) -> None:
        for dst, message in outs:
            if dst == CLIENT:
                self.client_replies.append(ClientOutcome(now, frm, message))
            else:
                self.send(frm, dst, message, now)

    def _arm_timer(self, node_id: int) -> None:
        node = self.nodes.get(node_id)
        if node is None:
            return
        deadline = node.next_deadline()
        if math.isinf(deadline):
            return
        target = self._timer_target.get(node_id, math.inf)
        if deadline < target:
            self._push(deadline, "timer", node_id)
            self._timer_target[node_id] = deadline

    def _check_halt(self, node: RaftNode) -> None:
        if node.halted is not None and (node.id, node.halted) not in self.halts:
            self.halts.append((node.id, node.halted))

    # ------------------------------------------------------------------
    # workload

    def inject(self, at: float, node_id: int, command: bytes, request_id: str) -> None:
        self.injections.append(Injection(at, node_id, command, request_id))
        self._push(at, "inject", node_id, command, request_id)

    # ------------------------------------------------------------------
    # main loop

    def run(self, until: float, stop_when=None) -> None:
        stopped = False
        while self._heap and self._heap[0][0] <= until:
            time, _, kind, payload = heapq.heappop(self._heap)
            self.now = time
            self.events_processed += 1
            if self.events_processed > self.sim_config.event_budget:
                raise AbortedRunError(
                    f"event budget {self.sim_config.event_budget} exhausted at t={time:.1f}"
                )
            if kind == "deliver":
                frm, to, message = payload
                node = self.nodes.get(to)
                if node is None:
                    continue
                if self.record_trace:
                    self.trace.append(
                        f"{time:.6f}|{frm}|{to}|{variant_name(message)}|{to_wire(message).hex()}"
                    )
                outs = node.handle(frm, message, time)
                self._check_halt(node)
                self._dispatch(to, outs, time)
                self._arm_timer(to)
            elif kind == "timer":
                (node_id,) = payload
                if self._timer_target.get(node_id) == time:
                    del self._timer_target[node_id]
                node = self.nodes.get(node_id)
                if node is None:
                    continue
                if node.next_deadline() <= time:
                    outs = node.tick(time)
                    self._check_halt(node)
                    self._dispatch(node_id, outs, time)
                self._arm_timer(node_id)
            elif kind == "inject":
                node_id, command, request_id = payload
                node = self.nodes.get(node_id)
                if node is None:
                    self.dead_injections.add(request_id)
                    continue
                outs = node.client_apply(command, request_id, time)
                self._check_halt(node)
                self._dispatch(node_id, outs, time)
                self._arm_timer(node_id)
            elif kind == "crash":
                (node_id,) = payload
                self._retire(node_id)
            elif kind == "restart":
                (node_id,) = payload
                self.nodes[node_id] = self._make_node(node_id, time)
                self._arm_timer(node_id)
            if stop_when is not None and stop_when(self):
                stopped = True
                break
        if not stopped:
            self.now = max(self.now, until)

    def _retire(self, node_id: int) -> None:
        node = self.nodes.pop(node_id, None)
        if node is None:
            return
        self._harvest(node)
        self._timer_target.pop(node_id, None)

    def _harvest(self, node: RaftNode) -> None:
        for record in node.commit_journal:
            self.commit_records.append((node.id, record))
        for term, time in node.elections_won:
            self.election_records.append((node.id, term, time))

    # ------------------------------------------------------------------
    # results

    def finish(self) -> None:
        """Fold live node journals into the accumulated records, once."""
        if getattr(self, "_finished", False):
            return
        self._finished = True
        for node in self.nodes.values():
            self._harvest(node)
            self._check_halt(node)

    def current_leader(self) -> int | None:
        leaders = [n for n in self.nodes.values() if n.role is Role.LEADER]
        if not leaders:
            return None
        return max(leaders, key=lambda n: n.current_term).id

    def committed_prefixes(self) -> dict[int, list[LogEntry]]:
        return {node_id: node.committed_prefix() for node_id, node in self.nodes.items()}

    def trace_text(self) -> str:
        return "\n".join(self.trace) + ("\n" if self.trace else "")

    def trace_hash(self) -> str:
        return hashlib.sha256(self.trace_text().encode()).hexdigest()
