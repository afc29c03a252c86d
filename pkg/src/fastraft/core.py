"""Core types shared by the consensus state machines.

Log entries carry an explicit status so the replication layer can tell
tentative fast-path insertions apart from classically replicated and
committed entries.  Everything here is protocol-agnostic arithmetic and
plain data; no I/O and no randomness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum


class InvalidConfigError(ValueError):
    """Raised for cluster or simulation configuration that cannot run."""


class EntryStatus(Enum):
    TENTATIVE_FAST = "TENTATIVE_FAST"
    ACCEPTED_CLASSIC = "ACCEPTED_CLASSIC"
    COMMITTED = "COMMITTED"


@dataclass(frozen=True, slots=True)
class LogEntry:
    """One replicated log slot.

    ``index`` is 1-based; 0 is reserved as the empty-log sentinel.
    ``status`` is bookkeeping, not identity: two entries are the same
    proposal iff index, term, command and proposer all match.
    """

    index: int
    term: int
    command: bytes
    status: EntryStatus
    proposer: int

    def key(self) -> tuple[int, int, bytes, int]:
        """Identity of the proposal, ignoring status."""
        return (self.index, self.term, self.command, self.proposer)

    def same_value(self, other: LogEntry) -> bool:
        """Same decided value; recovery may restamp the term around it."""
        return (
            self.index == other.index
            and self.command == other.command
            and self.proposer == other.proposer
        )

    def with_status(self, status: EntryStatus) -> LogEntry:
        return replace(self, status=status)

    def is_noop(self) -> bool:
        return self.command == b""


def entry_conflicts(a: LogEntry, b: LogEntry) -> bool:
    """True iff a and b claim the same slot with different identity."""
    return a.index == b.index and a.key() != b.key()


def encode_entry(entry: LogEntry) -> str:
    """Canonical one-line form: index|term|proposer|status|hex(command)."""
    return "|".join(
        (
            str(entry.index),
            str(entry.term),
            str(entry.proposer),
            entry.status.name,
            entry.command.hex(),
        )
    )


def decode_entry(line: str) -> LogEntry:
    parts = line.strip().split("|")
    if len(parts) != 5:
        raise ValueError(f"malformed entry line: {line!r}")
    index, term, proposer, status, command = parts
    return LogEntry(
        index=int(index),
        term=int(term),
        command=bytes.fromhex(command),
        status=EntryStatus[status],
        proposer=int(proposer),
    )


def classic_quorum_size(members: int) -> int:
    """Majority quorum used by classic replication and elections."""
    if members < 1:
        raise InvalidConfigError(f"cluster needs at least one member, got {members}")
    return members // 2 + 1


def fast_quorum_size(members: int) -> int:
    """Fast-track quorum: ceil(3M/4) supporters finalize an entry."""
    if members < 1:
        raise InvalidConfigError(f"cluster needs at least one member, got {members}")
    return math.ceil(3 * members / 4)


def quorum_overlap(members: int) -> int:
    """Guaranteed intersection between one fast and one classic quorum."""
    return fast_quorum_size(members) + classic_quorum_size(members) - members


def double_fast_overlap_holds(members: int) -> bool:
    """Whether two fast quorums always intersect in a classic quorum.

    This is not required by the commit rule (votes are only tallied at
    the leader) and it genuinely fails whenever M is a multiple of 4.
    Recorded so the recovery logic never silently assumes it.
    """
    return 2 * fast_quorum_size(members) - members >= classic_quorum_size(members)


@dataclass(frozen=True, slots=True)
class ClusterConfig:
    """Static cluster membership and protocol timers.

    Times are simulated milliseconds.  The election timeout lower bound
    must clear two heartbeat intervals or a healthy leader could not
    suppress elections.
    """

    members: tuple[int, ...]
    election_timeout: tuple[float, float] = (150.0, 300.0)
    heartbeat_interval: float = 50.0
    fast_vote_timeout: float = 100.0
    # Extra operational knobs; defaults chosen so client traffic survives
    # lossy links without violating exactly-once commitment.
    forward_timeout: float = 5000.0
    retry_interval: float = 300.0
    forward_buffer_limit: int = 1024
    # None means every member is fast-eligible in every term.
    fast_eligible: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if not self.members:
            raise InvalidConfigError("cluster needs at least one member")
        if len(set(self.members)) != len(self.members):
            raise InvalidConfigError(f"duplicate member ids: {self.members}")
        lo, hi = self.election_timeout
        if not lo < hi:
            raise InvalidConfigError(f"election timeout range must be increasing, got {lo}..{hi}")
        if not lo > 2 * self.heartbeat_interval:
            raise InvalidConfigError(
                f"election timeout min {lo} must exceed twice the heartbeat interval "
                f"{self.heartbeat_interval}"
            )
        if self.fast_vote_timeout <= 0:
            raise InvalidConfigError("fast vote timeout must be positive")
        if self.fast_eligible is not None:
            unknown = set(self.fast_eligible) - set(self.members)
            if unknown:
                raise InvalidConfigError(f"fast-eligible ids outside membership: {sorted(unknown)}")

    @property
    def size(self) -> int:
        return len(self.members)

    def classic_quorum(self) -> int:
        return classic_quorum_size(self.size)

    def fast_quorum(self) -> int:
        return fast_quorum_size(self.size)


@dataclass(slots=True)
class PersistentState:
    """State a node must recover after a crash: term, vote, and log.

    The vote book maps index -> (term, proposal id) and records fast
    votes already cast, so a restarted node cannot vote twice for the
    same slot in the same term.
    """

    current_term: int = 0
    voted_for: int | None = None
    log: dict[int, LogEntry] = field(default_factory=dict)
    fast_votes: dict[int, tuple[int, tuple[int, int]]] = field(default_factory=dict)


def encode_snapshot(state: PersistentState) -> str:
    """Snapshot file body: `term|votedFor` header, one entry line each,
    then one `v|index|term|proposer|seq` line per recorded fast vote."""
    voted = "" if state.voted_for is None else str(state.voted_for)
    lines = [f"{state.current_term}|{voted}"]
    for index in sorted(state.log):
        lines.append(encode_entry(state.log[index]))
    for index in sorted(state.fast_votes):
        term, (proposer, seq) = state.fast_votes[index]
        lines.append(f"v|{index}|{term}|{proposer}|{seq}")
    return "\n".join(lines) + "\n"


def decode_snapshot(text: str) -> PersistentState:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValueError("empty snapshot")
    term_part, voted_part = lines[0].split("|")
    log: dict[int, LogEntry] = {}
    fast_votes: dict[int, tuple[int, tuple[int, int]]] = {}
    for line in lines[1:]:
        if line.startswith("v|"):
            _, index, term, proposer, seq = line.split("|")
            fast_votes[int(index)] = (int(term), (int(proposer), int(seq)))
        else:
            entry = decode_entry(line)
            log[entry.index] = entry
    return PersistentState(
        current_term=int(term_part),
        voted_for=int(voted_part) if voted_part else None,
        log=log,
        fast_votes=fast_votes,
    )
