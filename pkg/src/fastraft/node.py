"""Classic Raft as a deterministic state machine.

A node never touches a clock or a socket: callers deliver messages via
``handle`` and advance time via ``tick``, and both return the batch of
(destination, message) pairs to transmit.  All randomness (election
jitter) comes from the injected ``random.Random``, so a seeded driver
replays identically.

Log shape: committed and classically accepted entries form a contiguous
prefix starting at index 1 (the "classic frontier").  Fast-track
tentative entries may sit above that frontier, possibly with gaps, and
are resolved by the fast layer; this module treats them as opaque slot
occupants that lose to any classic entry shipped by a leader.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .core import (
    ClusterConfig,
    EntryStatus,
    LogEntry,
    PersistentState,
    encode_snapshot,
)
from .messages import (
    AppendEntries,
    AppendEntriesReply,
    ClientApplyReply,
    ForwardOperation,
    Message,
    RequestVote,
    RequestVoteReply,
)

# Pseudo-destination for replies addressed to the local client rather
# than a cluster member.
CLIENT = -1

NOOP = b""


class Role(Enum):
    FOLLOWER = "FOLLOWER"
    CANDIDATE = "CANDIDATE"
    LEADER = "LEADER"


Outbound = list[tuple[int, Message]]


@dataclass(slots=True)
class CommitRecord:
    """One promotion to COMMITTED, as observed locally."""

    time: float
    index: int
    entry: LogEntry
    track: str
    as_leader: bool


@dataclass(slots=True)
class _BufferedForward:
    command: bytes
    deadline: float
    request_id: str | None


@dataclass(slots=True)
class _PendingRequest:
    command: bytes
    retry_at: float


class RaftNode:
    """One cluster member running the classic protocol."""

    def __init__(
        self,
        node_id: int,
        config: ClusterConfig,
        *,
        store: PersistentState | None = None,
        rng: random.Random | None = None,
        now: float = 0.0,
        snapshot_path: str | None = None,
    ) -> None:
        self.id = node_id
        self.config = config
        self.peers = tuple(m for m in config.members if m != node_id)
        self.rng = rng if rng is not None else random.Random(node_id)
        self.snapshot_path = snapshot_path

        self.store = store if store is not None else PersistentState()
        self.log = self.store.log
        self.current_term = self.store.current_term
        self.voted_for = self.store.voted_for

        self.role = Role.FOLLOWER
        self.known_leader: int | None = None
        self.halted: str | None = None

        self.commit_index = self._recover_commit_index()
        self.last_applied = self.commit_index
        self._frontier = self._recover_frontier()
        self._max_index = max(self.log) if self.log else 0
        self._commands_seen: dict[bytes, int] = {
            e.command: e.index for e in self.log.values() if e.command
        }

        self.next_index: dict[int, int] = {}
        self.match_index: dict[int, int] = {}
        self.votes_granted: set[int] = set()
        self.pending_reports: dict[int, tuple[LogEntry, ...]] = {}

        self.forward_buffer: list[_BufferedForward] = []
        self.pending_requests: dict[str, _PendingRequest] = {}
        self._command_requests: dict[bytes, str] = {}
        self._origin_track: dict[int, str] = {}

        self.commit_journal: list[CommitRecord] = []
        self.elections_won: list[tuple[int, float]] = []

        self.election_deadline = now + self._election_delay()
        self.heartbeat_deadline = math.inf

    # ------------------------------------------------------------------
    # recovery helpers

    def _recover_commit_index(self) -> int:
        n = 0
        while True:
            entry = self.log.get(n + 1)
            if entry is None or entry.status is not EntryStatus.COMMITTED:
                return n
            n += 1

    def _recover_frontier(self) -> int:
        n = self.commit_index
        while True:
            entry = self.log.get(n + 1)
            if entry is None or entry.status is EntryStatus.TENTATIVE_FAST:
                return n
            n += 1

    # ------------------------------------------------------------------
    # log bookkeeping

    def _log_put(self, entry: LogEntry) -> None:
        old = self.log.get(entry.index)
        if old is not None and old.command and self._commands_seen.get(old.command) == old.index:
            del self._commands_seen[old.command]
        self.log[entry.index] = entry
        if entry.command:
            self._commands_seen[entry.command] = entry.index
        if entry.index > self._max_index:
            self._max_index = entry.index
        if entry.index <= self._frontier and entry.status is EntryStatus.TENTATIVE_FAST:
            self._frontier = entry.index - 1
        elif entry.index == self._frontier + 1 and entry.status is not EntryStatus.TENTATIVE_FAST:
            n = entry.index
            while True:
                nxt = self.log.get(n + 1)
                if nxt is None or nxt.status is EntryStatus.TENTATIVE_FAST:
                    break
                n += 1
            self._frontier = n
        self._write_snapshot()

    def _truncate_from(
        self, index: int, allow_committed: bool = False, spare_above: int | None = None
    ) -> None:
        """Drop every entry at or above index.

        Committed slots may go only when the caller has checked that the
        incoming entries restore every one of them by value.  Current-term
        fast proposals above spare_above survive: a conflict below says
        nothing about their slots, and the accept votes already cast for
        them may be part of a pronouncement the leader is assembling.
        """
        for idx in [i for i in self.log if i >= index]:
            old = self.log[idx]
            if (
                spare_above is not None
                and idx > spare_above
                and old.status is EntryStatus.TENTATIVE_FAST
                and old.term == self.current_term
            ):
                continue
            assert allow_committed or old.status is not EntryStatus.COMMITTED
            if old.command and self._commands_seen.get(old.command) == idx:
                del self._commands_seen[old.command]
            del self.log[idx]
        if index - 1 < self._frontier:
            self._frontier = index - 1
        self._max_index = max(self.log) if self.log else 0
        self._write_snapshot()

    def _write_snapshot(self) -> None:
        if self.snapshot_path is not None:
            self.store.current_term = self.current_term
            self.store.voted_for = self.voted_for
            Path(self.snapshot_path).write_text(encode_snapshot(self.store))

    def _persist_meta(self) -> None:
        self.store.current_term = self.current_term
        self.store.voted_for = self.voted_for
        if self.snapshot_path is not None:
            self._write_snapshot()

    def _halt(self, reason: str) -> None:
        self.halted = reason

    def _last_classic(self) -> tuple[int, int]:
        """(index, term) of the last non-tentative entry; (0, 0) when empty."""
        if self._frontier == 0:
            return (0, 0)
        return (self._frontier, self.log[self._frontier].term)

    def _election_delay(self) -> float:
        lo, hi = self.config.election_timeout
        return self.rng.uniform(lo, hi)

    # ------------------------------------------------------------------
    # role transitions

    def _adopt_term(self, term: int) -> None:
        self.current_term = term
        self.voted_for = None
        self._become_follower()
        self._persist_meta()

    def _become_follower(self) -> None:
        self.role = Role.FOLLOWER
        self.next_index = {}
        self.match_index = {}
        self.votes_granted = set()
        self.pending_reports = {}
        self.heartbeat_deadline = math.inf
        self._stepped_down()

    def _stepped_down(self) -> None:
        """Hook for the fast layer; classic nodes keep no extra state."""

    def _start_election(self, now: float) -> Outbound:
        self.current_term += 1
        self.voted_for = self.id
        self._persist_meta()
        self.role = Role.CANDIDATE
        self.known_leader = None
        self.votes_granted = {self.id}
        self.pending_reports = {self.id: self._pending_report()}
        self.election_deadline = now + self._election_delay()
        if len(self.votes_granted) >= self.config.classic_quorum():
            return self._become_leader(now)
        last_index, last_term = self._last_classic()
        vote = RequestVote(
            self.current_term, self.id, last_index, last_term, self.commit_index
        )
        return [(peer, vote) for peer in self.peers]

    def _become_leader(self, now: float) -> Outbound:
        self.role = Role.LEADER
        self.known_leader = self.id
        self.elections_won.append((self.current_term, now))
        self._resolve_pending_slots(now)
        self._append_barrier()
        self.next_index = {peer: max(1, self._frontier) for peer in self.peers}
        self.match_index = {peer: 0 for peer in self.peers}
        outs = self._leader_advance_commit(now)
        outs += self._broadcast_append(now)
        for buffered in self.forward_buffer:
            outs += self._leader_submit(buffered.command, now)
        self.forward_buffer = []
        for pending in self.pending_requests.values():
            if pending.command not in self._commands_seen:
                outs += self._leader_submit(pending.command, now)
        return outs

    def _resolve_pending_slots(self, now: float) -> None:
        """Hook for the fast layer; classic logs carry no tentative slots."""

    def _append_barrier(self) -> None:
        """Barrier entry: committing a fresh no-op in this term pulls every
        inherited entry through the classic commit rule."""
        barrier = LogEntry(
            self._max_index + 1, self.current_term, NOOP, EntryStatus.ACCEPTED_CLASSIC, self.id
        )
        self._log_put(barrier)
        self._origin_track[barrier.index] = "noop"

    def _pending_report(self, floor: int | None = None) -> tuple[LogEntry, ...]:
        """Every log entry above floor, committed ones included.

        Committed entries matter when the floor is a candidate's commit
        index sitting below ours: a fast commit is pronounced while the
        other acceptors still hold tentative copies, so hiding our
        committed copy could leave the candidate without enough evidence
        to preserve the slot.
        """
        if floor is None:
            floor = self.commit_index
        return tuple(self.log[i] for i in sorted(self.log) if i > floor)

    # ------------------------------------------------------------------
    # timers

    def next_deadline(self) -> float:
        if self.halted is not None:
            return math.inf
        deadline = self.heartbeat_deadline if self.role is Role.LEADER else self.election_deadline
        for pending in self.pending_requests.values():
            deadline = min(deadline, pending.retry_at)
        for buffered in self.forward_buffer:
            deadline = min(deadline, buffered.deadline)
        return min(deadline, self._extra_deadline())

    def _extra_deadline(self) -> float:
        return math.inf

    def tick(self, now: float) -> Outbound:
        if self.halted is not None:
            return []
        outs: Outbound = []
        if self.role is Role.LEADER:
            if now >= self.heartbeat_deadline:
                outs += self._broadcast_append(now)
            outs += self._fast_housekeeping(now)
        elif now >= self.election_deadline:
            outs += self._start_election(now)
        outs += self._client_housekeeping(now)
        return outs if self.halted is None else []

    def _fast_housekeeping(self, now: float) -> Outbound:
        return []

    def _client_housekeeping(self, now: float) -> Outbound:
        outs: Outbound = []
        keep: list[_BufferedForward] = []
        for buffered in self.forward_buffer:
            if now >= buffered.deadline:
                if buffered.request_id is not None:
                    outs.append(
                        (CLIENT, ClientApplyReply(buffered.request_id, failure="no leader"))
                    )
                    self.pending_requests.pop(buffered.request_id, None)
            else:
                keep.append(buffered)
        self.forward_buffer = keep
        for request_id, pending in list(self.pending_requests.items()):
            if now >= pending.retry_at:
                pending.retry_at = now + self.config.retry_interval
                outs += self._submit_local(pending.command, request_id, now)
        return outs

    # ------------------------------------------------------------------
    # client entry points

    def client_apply(self, command: bytes, request_id: str, now: float) -> Outbound:
        if self.halted is not None:
            return []
        self.pending_requests[request_id] = _PendingRequest(
            command, now + self.config.retry_interval
        )
        self._command_requests[command] = request_id
        return self._submit_local(command, request_id, now)

    def _submit_local(self, command: bytes, request_id: str | None, now: float) -> Outbound:
        if command in self._commands_seen:
            return self._retry_in_log(command, now)
        if self.role is Role.LEADER:
            return self._leader_submit(command, now)
        fast = self._try_fast(command, now)
        if fast is not None:
            return fast
        if self.known_leader is not None and self.known_leader != self.id:
            return [(self.known_leader, ForwardOperation(command))]
        return self._buffer_forward(command, request_id, now)

    def _retry_in_log(self, command: bytes, now: float) -> Outbound:
        return []

    def _try_fast(self, command: bytes, now: float) -> Outbound | None:
        return None

    def _buffer_forward(self, command: bytes, request_id: str | None, now: float) -> Outbound:
        for buffered in self.forward_buffer:
            if buffered.command == command:
                return []
        if len(self.forward_buffer) >= self.config.forward_buffer_limit:
            if request_id is not None:
                self.pending_requests.pop(request_id, None)
                return [(CLIENT, ClientApplyReply(request_id, failure="forward buffer full"))]
            return []
        self.forward_buffer.append(
            _BufferedForward(command, now + self.config.forward_timeout, request_id)
        )
        return []

    def _drain_forwards(self) -> Outbound:
        if not self.forward_buffer or self.known_leader in (None, self.id):
            return []
        outs: Outbound = [
            (self.known_leader, ForwardOperation(buffered.command))
            for buffered in self.forward_buffer
        ]
        self.forward_buffer = []
        return outs

    # ------------------------------------------------------------------
    # leader replication

    def _leader_submit(self, command: bytes, now: float, track: str = "classic") -> Outbound:
        assert self.role is Role.LEADER
        if command and command in self._commands_seen:
            return []
        entry = LogEntry(
            self._max_index + 1, self.current_term, command, EntryStatus.ACCEPTED_CLASSIC, self.id
        )
        self._log_put(entry)
        self._origin_track.setdefault(entry.index, track)
        outs = self._leader_advance_commit(now)
        outs += self._broadcast_append(now)
        return outs

    def _broadcast_append(self, now: float) -> Outbound:
        self.heartbeat_deadline = now + self.config.heartbeat_interval
        return [(peer, self._append_for(peer)) for peer in self.peers]

    def _append_for(self, peer: int) -> AppendEntries:
        ni = min(max(self.next_index.get(peer, 1), 1), self._frontier + 1)
        prev = ni - 1
        prev_term = self.log[prev].term if prev >= 1 else 0
        entries = []
        for idx in range(ni, self._frontier + 1):
            entry = self.log[idx]
            if entry.status is not EntryStatus.ACCEPTED_CLASSIC:
                entry = entry.with_status(EntryStatus.ACCEPTED_CLASSIC)
            entries.append(entry)
        return AppendEntries(
            self.current_term,
            self.id,
            prev,
            prev_term,
            tuple(entries),
            self.commit_index,
            self._designation(),
        )

    def _designation(self) -> tuple[int, ...]:
        return ()

    def _leader_advance_commit(self, now: float) -> Outbound:
        outs: Outbound = []
        quorum = self.config.classic_quorum()
        while True:
            n = self.commit_index + 1
            entry = self.log.get(n)
            if entry is None:
                break
            if entry.status is EntryStatus.COMMITTED:
                # Already pronounced by the fast track; just advance.
                self.commit_index = n
                self.last_applied = n
                outs += self._notify_origin(entry, n)
                continue
            if entry.status is EntryStatus.TENTATIVE_FAST:
                break
            acked = sorted(
                (self.match_index[peer] for peer in self.peers), reverse=True
            )
            need = quorum - 1
            reach = self._frontier if need == 0 else (acked[need - 1] if need <= len(acked) else 0)
            reach = min(reach, self._frontier)
            target = self._commit_target(reach)
            if target <= self.commit_index:
                break
            outs += self._advance_commit(target, now)
        return outs

    def _commit_target(self, reach: int) -> int:
        """Highest replicated index safe to commit.

        Any current-term entry works, including a fast-pronounced slot:
        acks at match >= target cover everything below it.  An inherited
        pronounced slot from an older term is final for its own index
        but says nothing about its predecessors, so stop there.
        """
        for candidate in range(reach, self.commit_index, -1):
            inspect = self.log[candidate]
            if inspect.term == self.current_term:
                return candidate
            if inspect.status is EntryStatus.COMMITTED:
                break
        return 0

    def _advance_commit(self, target: int, now: float) -> Outbound:
        outs: Outbound = []
        while self.commit_index < target:
            n = self.commit_index + 1
            entry = self.log[n]
            assert entry.status is not EntryStatus.TENTATIVE_FAST
            if entry.status is not EntryStatus.COMMITTED:
                entry = entry.with_status(EntryStatus.COMMITTED)
                self._log_put(entry)
                track = self._origin_track.get(n, "classic")
                self.commit_journal.append(
                    CommitRecord(now, n, entry, track, self.role is Role.LEADER)
                )
            self.commit_index = n
            self.last_applied = n
            outs += self._notify_origin(entry, n)
        return outs

    def _notify_origin(self, entry: LogEntry, index: int) -> Outbound:
        request_id = self._command_requests.get(entry.command) if entry.command else None
        if request_id is None or request_id not in self.pending_requests:
            return []
        del self.pending_requests[request_id]
        return [(CLIENT, ClientApplyReply(request_id, committed_index=index))]

    # ------------------------------------------------------------------
    # message dispatch

    def handle(self, sender: int, message: Message, now: float) -> Outbound:
        if self.halted is not None:
            return []
        if isinstance(message, RequestVote):
            outs = self._on_request_vote(message, now)
        elif isinstance(message, RequestVoteReply):
            outs = self._on_request_vote_reply(message, now)
        elif isinstance(message, AppendEntries):
            outs = self._on_append_entries(message, now)
        elif isinstance(message, AppendEntriesReply):
            outs = self._on_append_entries_reply(message, now)
        elif isinstance(message, ForwardOperation):
            outs = self._on_forward(message, now)
        else:
            outs = self._on_fast_message(sender, message, now)
        return outs if self.halted is None else []

    def _on_fast_message(self, sender: int, message: Message, now: float) -> Outbound:
        raise TypeError(f"unexpected message {type(message).__name__}")

    def _on_request_vote(self, msg: RequestVote, now: float) -> Outbound:
        if msg.term > self.current_term:
            self._adopt_term(msg.term)
        granted = False
        if (
            msg.term == self.current_term
            and self.voted_for in (None, msg.candidate)
            and self._candidate_up_to_date(msg)
        ):
            granted = True
            if self.voted_for is None:
                self.voted_for = msg.candidate
                self._persist_meta()
            self.election_deadline = now + self._election_delay()
        reply = RequestVoteReply(
            self.current_term, self.id, granted, self._pending_report(msg.commit_index)
        )
        return [(msg.candidate, reply)]

    def _candidate_up_to_date(self, msg: RequestVote) -> bool:
        # Tentative entries are unfinalized by definition and carry no
        # weight in elections; compare classic suffixes only.
        last_index, last_term = self._last_classic()
        return (msg.last_log_term, msg.last_log_index) >= (last_term, last_index)

    def _on_request_vote_reply(self, msg: RequestVoteReply, now: float) -> Outbound:
        if msg.term > self.current_term:
            self._adopt_term(msg.term)
            return []
        if self.role is not Role.CANDIDATE or msg.term != self.current_term:
            return []
        self.pending_reports[msg.voter] = msg.pending
        if msg.granted:
            self.votes_granted.add(msg.voter)
            if len(self.votes_granted) >= self.config.classic_quorum():
                return self._become_leader(now)
        return []

    def _on_append_entries(self, msg: AppendEntries, now: float) -> Outbound:
        if msg.term > self.current_term:
            self._adopt_term(msg.term)
        if msg.term < self.current_term:
            reply = AppendEntriesReply(self.current_term, self.id, False, self._frontier)
            return [(msg.leader, reply)]
        if self.role is Role.LEADER:
            self._halt(f"second leader {msg.leader} in term {msg.term}")
            return []
        if self.role is Role.CANDIDATE:
            self._become_follower()
        self.known_leader = msg.leader
        self.election_deadline = now + self._election_delay()
        self._observe_append(msg)
        outs = self._drain_forwards()
        if msg.prev_log_index > 0:
            prev = self.log.get(msg.prev_log_index)
            if (
                prev is None
                or prev.status is EntryStatus.TENTATIVE_FAST
                or prev.term != msg.prev_log_term
            ):
                hint = min(self._frontier, msg.prev_log_index - 1)
                outs.append((msg.leader, AppendEntriesReply(self.current_term, self.id, False, hint)))
                return outs
        held_before = {
            rid: self._commands_seen[p.command]
            for rid, p in self.pending_requests.items()
            if p.command in self._commands_seen
        }
        shipped = {e.index: e for e in msg.entries}
        recommit: set[int] = set()
        last_new = msg.prev_log_index
        for entry in msg.entries:
            last_new = entry.index
            local = self.log.get(entry.index)
            if local is not None and local.status is EntryStatus.COMMITTED:
                if local.key() == entry.key():
                    continue
                if local.same_value(entry):
                    # A recovery restamped the entry with its own term; the
                    # decided value is intact, so adopt the stamp the rest
                    # of the cluster converged on.
                    self._log_put(entry.with_status(EntryStatus.COMMITTED))
                    continue
                self._halt(
                    f"leader {msg.leader} tried to replace committed entry {local.index}"
                )
                return []
            if local is not None and local.key() == entry.key():
                if local.status is EntryStatus.TENTATIVE_FAST:
                    self._log_put(entry)
                continue
            if local is not None:
                for held_index in sorted(i for i in self.log if i > entry.index):
                    held = self.log[held_index]
                    if held.status is not EntryStatus.COMMITTED:
                        continue
                    restored = shipped.get(held_index)
                    if restored is None or not held.same_value(restored):
                        self._halt(
                            f"leader {msg.leader} conflicts below committed entry {held_index}"
                        )
                        return []
                    recommit.add(held_index)
                self._truncate_from(
                    entry.index,
                    allow_committed=True,
                    spare_above=msg.entries[-1].index,
                )
            if entry.index in recommit:
                self._log_put(entry.with_status(EntryStatus.COMMITTED))
            else:
                self._log_put(entry)
        # A pending command whose slot the leader just filled with
        # something else has definitively lost it; re-submit right away
        # rather than waiting out the retry timer.
        for rid, old_index in held_before.items():
            pending = self.pending_requests.get(rid)
            if pending is None or pending.command in self._commands_seen:
                continue
            if old_index <= last_new:
                pending.retry_at = now + self.config.retry_interval
                outs += self._submit_local(pending.command, rid, now)
        if msg.leader_commit > self.commit_index:
            outs += self._advance_commit(min(msg.leader_commit, last_new), now)
        outs.append((msg.leader, AppendEntriesReply(self.current_term, self.id, True, last_new)))
        return outs

    def _observe_append(self, msg: AppendEntries) -> None:
        """Hook for the fast layer (designation adoption, floor tracking)."""

    def _on_append_entries_reply(self, msg: AppendEntriesReply, now: float) -> Outbound:
        if msg.term > self.current_term:
            self._adopt_term(msg.term)
            return []
        if self.role is not Role.LEADER or msg.term != self.current_term:
            return []
        peer = msg.follower
        if msg.success:
            if msg.match_index > self.match_index[peer]:
                self.match_index[peer] = msg.match_index
            self.next_index[peer] = max(self.next_index[peer], msg.match_index + 1)
            outs = self._leader_advance_commit(now)
            if self.next_index[peer] <= self._frontier:
                outs.append((peer, self._append_for(peer)))
            return outs
        self.next_index[peer] = max(1, min(self.next_index[peer] - 1, msg.match_index + 1))
        return [(peer, self._append_for(peer))]

    def _on_forward(self, msg: ForwardOperation, now: float) -> Outbound:
        if self.role is Role.LEADER:
            return self._leader_submit(msg.command, now)
        if self.known_leader is not None and self.known_leader != self.id:
            return [(self.known_leader, msg)]
        return self._buffer_forward(msg.command, None, now)

    # ------------------------------------------------------------------
    # introspection

    def committed_prefix(self) -> list[LogEntry]:
        return [self.log[i] for i in range(1, self.commit_index + 1)]

    def state_key(self) -> tuple:
        """Hashable core state, for bounded schedule exploration."""
        return (
            self.id,
            self.role.name,
            self.current_term,
            self.voted_for,
            self.commit_index,
            self.known_leader,
            self.halted,
            tuple(sorted((i, e.key(), e.status.name) for i, e in self.log.items())),
            tuple(sorted(self.votes_granted)),
            tuple(sorted(self.next_index.items())),
            tuple(sorted(self.match_index.items())),
            tuple(sorted(f.command for f in self.forward_buffer)),
            tuple(sorted((r, p.command) for r, p in self.pending_requests.items())),
        )
