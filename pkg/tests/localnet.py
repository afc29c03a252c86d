"""In-memory cluster with instant, lossless delivery for unit tests.

Time only moves when a test calls a tick helper, so every exchange is
fully deterministic and inspectable between steps.
"""

from collections import deque
from typing import Callable

from fastraft.core import ClusterConfig
from fastraft.node import CLIENT, RaftNode, Role

DropRule = Callable[[int, int, object], bool]


class Net:
    def __init__(self, protocol: type[RaftNode], members: int = 3, **overrides) -> None:
        self.config = ClusterConfig(members=tuple(range(members)), **overrides)
        self.nodes = {m: protocol(m, self.config) for m in self.config.members}
        self.queue: deque[tuple[int, int, object]] = deque()
        self.client_replies: list[tuple[int, object]] = []

    def push(self, sender: int, outs) -> None:
        for dest, message in outs:
            self.queue.append((sender, dest, message))

    def deliver_all(self, now: float, drop: DropRule | None = None) -> int:
        delivered = 0
        while self.queue:
            sender, dest, message = self.queue.popleft()
            if drop is not None and drop(sender, dest, message):
                continue
            if dest == CLIENT:
                self.client_replies.append((sender, message))
                continue
            self.push(dest, self.nodes[dest].handle(sender, message, now))
            delivered += 1
        return delivered

    def elect(self, node_id: int, drop: DropRule | None = None) -> float:
        """Run node_id's election at its own deadline; returns that time."""
        node = self.nodes[node_id]
        now = node.election_deadline
        self.push(node_id, node.tick(now))
        self.deliver_all(now, drop)
        assert node.role is Role.LEADER, f"node {node_id} failed to win"
        return now

    def apply(self, node_id: int, command: bytes, request_id: str, now: float) -> None:
        node = self.nodes[node_id]
        self.push(node_id, node.client_apply(command, request_id, now))

    def heartbeat(self, leader_id: int, drop: DropRule | None = None) -> float:
        """Fire the leader's next heartbeat and settle the exchange."""
        leader = self.nodes[leader_id]
        now = leader.heartbeat_deadline
        self.push(leader_id, leader.tick(now))
        self.deliver_all(now, drop)
        return now
