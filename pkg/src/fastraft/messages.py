"""Protocol message types and the canonical wire codec.

The simulator traces every delivery as `time|from|to|variant|payload-hex`,
so each message must round-trip through a stable byte encoding.  Fields
are joined with `!` at the top level; nested log entries reuse the
canonical `|`-separated entry line with `;` between entries, and free
byte or text fields are hex-escaped.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .core import LogEntry, decode_entry, encode_entry


@dataclass(frozen=True, slots=True)
class RequestVote:
    term: int
    candidate: int
    last_log_index: int
    last_log_term: int
    # The candidate's commit index.  Voters scope their log report to
    # the entries above it, which is exactly the window the candidate
    # re-decides if it wins.
    commit_index: int = 0


@dataclass(frozen=True, slots=True)
class RequestVoteReply:
    """Vote response, carrying the voter's log tail.

    ``pending`` lists every entry the voter holds above the candidate's
    commit index, whatever its status.  A newly elected leader uses
    these reports to decide which fast-track entries may already have
    been finalized by a previous leader and must be preserved.  Entries
    the voter itself has committed must be included: a fast commit is
    pronounced while the acceptors still hold tentative copies, so the
    pronouncer's own report can be the only committed evidence.
    """

    term: int
    voter: int
    granted: bool
    pending: tuple[LogEntry, ...] = ()


@dataclass(frozen=True, slots=True)
class AppendEntries:
    term: int
    leader: int
    prev_log_index: int
    prev_log_term: int
    entries: tuple[LogEntry, ...]
    leader_commit: int
    # Fast-track designation for this term, piggybacked on replication
    # traffic so it needs no extra message round.
    approved: tuple[int, ...] = ()


@dataclass(frozen=True, slots=True)
class AppendEntriesReply:
    term: int
    follower: int
    success: bool
    # Highest index known to match the leader's log; lets the leader
    # rewind nextIndex in one step instead of one probe per entry.
    match_index: int


@dataclass(frozen=True, slots=True)
class ForwardOperation:
    command: bytes


@dataclass(frozen=True, slots=True)
class FastProposal:
    term: int
    entry: LogEntry
    # (proposer id, per-proposer sequence) names the proposal across the
    # cluster; the entry's slot may be contested by other proposals.
    proposal_id: tuple[int, int]


@dataclass(frozen=True, slots=True)
class FastVote:
    term: int
    voter: int
    proposal_id: tuple[int, int]
    index: int
    accept: bool


@dataclass(frozen=True, slots=True)
class ClientApply:
    command: bytes
    request_id: str


@dataclass(frozen=True, slots=True)
class ClientApplyReply:
    request_id: str
    committed_index: int | None = None
    redirect: int | None = None
    failure: str | None = None


Message = (
    RequestVote
    | RequestVoteReply
    | AppendEntries
    | AppendEntriesReply
    | ForwardOperation
    | FastProposal
    | FastVote
    | ClientApply
    | ClientApplyReply
)

_TYPES = {
    cls.__name__: cls
    for cls in (
        RequestVote,
        RequestVoteReply,
        AppendEntries,
        AppendEntriesReply,
        ForwardOperation,
        FastProposal,
        FastVote,
        ClientApply,
        ClientApplyReply,
    )
}


def _encode_value(value: object) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if value is None:
        return "~"
    if isinstance(value, bytes):
        return "x" + value.hex()
    if isinstance(value, str):
        return "s" + value.encode().hex()
    if isinstance(value, LogEntry):
        return encode_entry(value)
    if isinstance(value, tuple):
        return ";".join(_encode_value(item) for item in value)
    raise TypeError(f"cannot encode field value {value!r}")


def _decode_value(text: str, kind: str) -> object:
    if kind == "int":
        return int(text)
    if kind == "bool":
        return text == "1"
    if kind == "int | None":
        return None if text == "~" else int(text)
    if kind == "str | None":
        return None if text == "~" else bytes.fromhex(text[1:]).decode()
    if kind == "bytes":
        return bytes.fromhex(text[1:])
    if kind == "str":
        return bytes.fromhex(text[1:]).decode()
    if kind == "LogEntry":
        return decode_entry(text)
    if kind == "tuple[LogEntry, ...]":
        return tuple(decode_entry(part) for part in text.split(";") if part)
    if kind == "tuple[int, ...]":
        return tuple(int(part) for part in text.split(";") if part)
    if kind == "tuple[int, int]":
        first, second = text.split(";")
        return (int(first), int(second))
    raise TypeError(f"cannot decode field kind {kind!r}")


def to_wire(message: Message) -> bytes:
    parts = [type(message).__name__]
    for spec in fields(message):
        parts.append(_encode_value(getattr(message, spec.name)))
    return "!".join(parts).encode()


def from_wire(payload: bytes) -> Message:
    parts = payload.decode().split("!")
    cls = _TYPES.get(parts[0])
    if cls is None:
        raise ValueError(f"unknown message variant {parts[0]!r}")
    specs = fields(cls)
    if len(parts) != len(specs) + 1:
        raise ValueError(f"field count mismatch for {parts[0]}: {len(parts) - 1}")
    values = [_decode_value(text, spec.type) for text, spec in zip(parts[1:], specs)]
    return cls(*values)


def variant_name(message: Message) -> str:
    return type(message).__name__
