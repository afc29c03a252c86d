"""Fast-track replication layered on the classic state machine.

Any designated node may broadcast a proposal straight to its peers,
which tentatively insert it; the leader finalizes a slot once ceil(3M/4)
voters accept the same proposal, which is one network delay cheaper than
forwarding through the leader.  Insufficient or conflicting votes fall
back to classic replication of the best-supported proposal.

Safety hinges on three rules.  First, votes are only tallied at the
leader, so within a term each slot has a single decision point.  Second,
a voter refuses any proposal at or below its "fast floor", the highest
index it has seen covered by the leader's classic log; this pins fast
traffic above everything a leader of the term may already have decided.
Third, vote replies carry each voter's uncommitted tail, and a new
leader must adopt any entry that a fast quorum could have accepted
(enough reporters still hold it that the remaining silent nodes cannot
rule it out); a majority of reports always suffices to detect a
finalized entry because fast and classic quorums overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import EntryStatus, LogEntry
from .messages import AppendEntries, FastProposal, FastVote, ForwardOperation, Message
from .node import NOOP, CommitRecord, Outbound, RaftNode, Role

ProposalId = tuple[int, int]


@dataclass(slots=True)
class _SlotCandidate:
    # The entry stays None for votes about proposals not yet seen here.
    entry: LogEntry | None
    accepts: set[int] = field(default_factory=set)


@dataclass(slots=True)
class FastSlot:
    """Leader-side tally for one contested log index."""

    index: int
    deadline: float
    candidates: dict[ProposalId, _SlotCandidate] = field(default_factory=dict)
    voters: set[int] = field(default_factory=set)
    resolved: bool = False


class FastRaftNode(RaftNode):
    """Cluster member speaking classic Raft plus the fast track."""

    def __init__(self, *args, **kwargs) -> None:
        super().__init__(*args, **kwargs)
        self.approved: tuple[int, ...] = ()
        self.approved_epoch = -1
        self.fast_floor = self._frontier
        self.slots: dict[int, FastSlot] = {}
        own = [
            pid[1]
            for _, pid in self.store.fast_votes.values()
            if pid[0] == self.id
        ]
        self.proposal_seq = max(own) + 1 if own else 0

    # ------------------------------------------------------------------
    # proposer side

    def _try_fast(self, command: bytes, now: float) -> Outbound | None:
        if self.approved_epoch != self.current_term or self.id not in self.approved:
            return None
        eligible = self.config.fast_eligible
        if eligible is not None and self.id not in eligible:
            return None
        if self.known_leader is None or self.known_leader == self.id:
            return None
        index = max(self._max_index, self.fast_floor, self.commit_index) + 1
        entry = LogEntry(index, self.current_term, command, EntryStatus.TENTATIVE_FAST, self.id)
        pid = (self.id, self.proposal_seq)
        self.proposal_seq += 1
        self._log_put(entry)
        self._record_vote(index, pid)
        proposal = FastProposal(self.current_term, entry, pid)
        outs: Outbound = [(n, proposal) for n in self.approved if n != self.id]
        outs.append(
            (self.known_leader, FastVote(self.current_term, self.id, pid, index, True))
        )
        return outs

    def _retry_in_log(self, command: bytes, now: float) -> Outbound:
        index = self._commands_seen.get(command)
        entry = self.log.get(index) if index is not None else None
        if entry is None or entry.command != command:
            return []
        if entry.status is not EntryStatus.TENTATIVE_FAST or entry.proposer != self.id:
            # Classic replication owns it now; the commit watcher replies.
            return []
        if entry.term == self.current_term:
            voted = self.store.fast_votes.get(index)
            if voted is None or voted[0] != self.current_term or voted[1][0] != self.id:
                return []
            pid = voted[1]
            proposal = FastProposal(self.current_term, entry, pid)
            outs: Outbound = [(n, proposal) for n in self.approved if n != self.id]
            if self.known_leader not in (None, self.id):
                outs.append(
                    (self.known_leader, FastVote(self.current_term, self.id, pid, index, True))
                )
            return outs
        # A stale-term tentative is still our accept of record: the old
        # leader may have pronounced a fast quorum on it, so dropping it
        # here could erase the only surviving evidence.  Leave the slot
        # to replication traffic and nudge the current leader, which
        # dedups the command if the slot was in fact recovered.
        if self.known_leader not in (None, self.id):
            return [(self.known_leader, ForwardOperation(command))]
        return []

    def _record_vote(self, index: int, pid: ProposalId) -> None:
        self.store.fast_votes[index] = (self.current_term, pid)

    # ------------------------------------------------------------------
    # voter side

    def _on_fast_message(self, sender: int, message: Message, now: float) -> Outbound:
        if isinstance(message, FastProposal):
            return self._on_fast_proposal(message, now)
        if isinstance(message, FastVote):
            return self._on_fast_vote(message, now)
        return super()._on_fast_message(sender, message, now)

    def _on_fast_proposal(self, msg: FastProposal, now: float) -> Outbound:
        if msg.term > self.current_term:
            self._adopt_term(msg.term)
        if msg.term < self.current_term:
            return []
        accept = self._fast_vote_decision(msg)
        vote = FastVote(self.current_term, self.id, msg.proposal_id, msg.entry.index, accept)
        if self.role is Role.LEADER:
            return self._tally(vote, now, msg.entry)
        if self.known_leader is None or self.known_leader == self.id:
            return []
        return [(self.known_leader, vote)]

    def _fast_vote_decision(self, msg: FastProposal) -> bool:
        entry = msg.entry
        index = entry.index
        if self.approved_epoch != self.current_term or self.id not in self.approved:
            return False
        if index <= max(self.commit_index, self.fast_floor):
            return False
        voted = self.store.fast_votes.get(index)
        if voted is not None and voted[0] == self.current_term:
            # At most one accept per (index, term); repeat accepts of the
            # same proposal keep retransmissions idempotent.
            return voted[1] == msg.proposal_id
        if entry.command and self._commands_seen.get(entry.command) not in (None, index):
            # A retried command already holds another slot here; accepting
            # would let the same command land twice.
            return False
        local = self.log.get(index)
        if local is not None:
            if local.status is not EntryStatus.TENTATIVE_FAST:
                return False
            if local.term >= self.current_term:
                return False
            # A leftover tentative entry from an older term yields.
        self._log_put(entry)
        self._record_vote(index, msg.proposal_id)
        return True

    # ------------------------------------------------------------------
    # leader tally

    def _on_fast_vote(self, msg: FastVote, now: float) -> Outbound:
        if msg.term > self.current_term:
            self._adopt_term(msg.term)
            return []
        if self.role is not Role.LEADER or msg.term != self.current_term:
            return []
        return self._tally(msg, now, None)

    def _tally(self, vote: FastVote, now: float, hint: LogEntry | None) -> Outbound:
        index = vote.index
        if index <= self.commit_index:
            return []
        local = self.log.get(index)
        if local is not None and local.status is not EntryStatus.TENTATIVE_FAST:
            # The slot was decided classically while votes were in flight.
            slot = self.slots.get(index)
            if slot is not None and not slot.resolved:
                slot.resolved = True
                return self._requeue_losers(slot, None, now)
            return []
        slot = self.slots.get(index)
        if slot is None:
            slot = FastSlot(index, now + self.config.fast_vote_timeout)
            self.slots[index] = slot
        if slot.resolved:
            return []
        cand = slot.candidates.setdefault(vote.proposal_id, _SlotCandidate(None))
        if hint is not None and cand.entry is None:
            cand.entry = hint
        slot.voters.add(vote.voter)
        if vote.accept:
            cand.accepts.add(vote.voter)
        fast_q = self.config.fast_quorum()
        if cand.entry is not None and len(cand.accepts) >= fast_q:
            return self._fast_finalize(slot, cand, now)
        members = self.config.size
        silent = members - len(slot.voters)
        if all(len(c.accepts) + silent < fast_q for c in slot.candidates.values()):
            return self._fast_fallback(slot, now)
        return []

    def _fast_finalize(self, slot: FastSlot, cand: _SlotCandidate, now: float) -> Outbound:
        entry = cand.entry
        assert entry is not None and entry.term == self.current_term
        index = slot.index
        if entry.command and self._commands_seen.get(entry.command) not in (None, index):
            # Command already holds another slot; never commit it twice.
            return self._place_fill(slot, None, now)
        local = self.log.get(index)
        assert local is None or local.status is EntryStatus.TENTATIVE_FAST
        slot.resolved = True
        committed = entry.with_status(EntryStatus.COMMITTED)
        self._log_put(committed)
        self._origin_track[index] = "fast"
        self.commit_journal.append(CommitRecord(now, index, committed, "fast", True))
        outs = self._notify_origin(committed, index)
        outs += self._requeue_losers(slot, cand, now)
        outs += self._leader_advance_commit(now)
        outs += self._broadcast_append(now)
        return outs

    def _fast_fallback(self, slot: FastSlot, now: float) -> Outbound:
        if slot.resolved:
            return []
        local = self.log.get(slot.index)
        if local is not None and local.status is not EntryStatus.TENTATIVE_FAST:
            slot.resolved = True
            return self._requeue_losers(slot, None, now)
        seen = [c for c in slot.candidates.values() if c.entry is not None]
        winner = None
        if seen:
            winner = max(seen, key=lambda c: (len(c.accepts), -c.entry.proposer))
            if winner.entry.command and self._commands_seen.get(winner.entry.command) not in (
                None,
                slot.index,
            ):
                winner = None
        return self._place_fill(slot, winner, now)

    def _place_fill(self, slot: FastSlot, winner: _SlotCandidate | None, now: float) -> Outbound:
        index = slot.index
        local = self.log.get(index)
        if winner is None and local is None and self._max_index < index:
            # Nothing above depends on this slot; clear the tally and let
            # normal appends claim the index later.
            del self.slots[index]
            return []
        slot.resolved = True
        if winner is not None:
            filler = winner.entry.with_status(EntryStatus.ACCEPTED_CLASSIC)
            track = "fallback"
        else:
            filler = LogEntry(index, self.current_term, NOOP, EntryStatus.ACCEPTED_CLASSIC, self.id)
            track = "noop"
        self._log_put(filler)
        self._origin_track[index] = track
        outs = self._requeue_losers(slot, winner, now)
        outs += self._leader_advance_commit(now)
        outs += self._broadcast_append(now)
        return outs

    def _requeue_losers(
        self, slot: FastSlot, keep: _SlotCandidate | None, now: float
    ) -> Outbound:
        outs: Outbound = []
        for cand in slot.candidates.values():
            if cand is keep or cand.entry is None or not cand.entry.command:
                continue
            outs += self._leader_submit(cand.entry.command, now, track="fallback")
        return outs

    # ------------------------------------------------------------------
    # timers and designation

    def _extra_deadline(self) -> float:
        if self.role is not Role.LEADER:
            return super()._extra_deadline()
        pending = [s.deadline for s in self.slots.values() if not s.resolved]
        return min(pending) if pending else super()._extra_deadline()

    def _fast_housekeeping(self, now: float) -> Outbound:
        outs: Outbound = []
        for index in sorted(self.slots):
            slot = self.slots.get(index)
            if slot is None:
                continue
            if slot.resolved:
                if index <= self.commit_index:
                    del self.slots[index]
            elif now >= slot.deadline:
                outs += self._fast_fallback(slot, now)
        # A tentative or missing slot below occupied indexes stalls the
        # classic frontier; give it a vote deadline so it must resolve.
        for index in range(self._frontier + 1, self._max_index + 1):
            entry = self.log.get(index)
            if entry is not None and entry.status is not EntryStatus.TENTATIVE_FAST:
                continue
            if index not in self.slots:
                self.slots[index] = FastSlot(index, now + self.config.fast_vote_timeout)
        return outs

    def _designation(self) -> tuple[int, ...]:
        return self.approved if self.role is Role.LEADER else ()

    def _observe_append(self, msg: AppendEntries) -> None:
        if msg.approved:
            self.approved = msg.approved
            self.approved_epoch = msg.term
        floor = max(msg.prev_log_index + len(msg.entries), msg.leader_commit)
        if floor > self.fast_floor:
            self.fast_floor = floor

    def _stepped_down(self) -> None:
        self.slots = {}

    # ------------------------------------------------------------------
    # election-time recovery

    def _resolve_pending_slots(self, now: float) -> None:
        base = (
            self.config.fast_eligible
            if self.config.fast_eligible is not None
            else self.config.members
        )
        self.approved = tuple(sorted(set(base) | {self.id}))
        self.approved_epoch = self.current_term
        self.slots = {}

        reports = dict(self.pending_reports)
        reports[self.id] = self._pending_report()
        fast_q = self.config.fast_quorum()
        slack = self.config.size - len(reports)

        holders: dict[int, dict[tuple, set[int]]] = {}
        sample: dict[tuple, LogEntry] = {}
        weight: dict[tuple, int] = {}
        top = self._max_index
        for voter, entries in reports.items():
            for entry in entries:
                if entry.index <= self.commit_index:
                    continue
                key = entry.key()
                holders.setdefault(entry.index, {}).setdefault(key, set()).add(voter)
                sample.setdefault(key, entry)
                if entry.status is EntryStatus.COMMITTED:
                    w = 3
                elif entry.status is EntryStatus.ACCEPTED_CLASSIC:
                    w = 2
                else:
                    w = 1
                weight[key] = max(weight.get(key, 0), w)
                top = max(top, entry.index)

        kept_rank: dict[int, tuple[int, int]] = {}
        requeue: list[bytes] = []
        for index in range(self.commit_index + 1, top + 1):
            local = self.log.get(index)
            if local is not None and local.status is EntryStatus.COMMITTED:
                for key in holders.get(index, {}):
                    if weight[key] == 3 and not local.same_value(sample[key]):
                        self._halt(f"conflicting committed reports at index {index}")
                        return
                kept_rank[index] = (4, local.term)
                continue
            cands = holders.get(index, {})
            committed_keys = [k for k in cands if weight[k] == 3]
            if committed_keys:
                first = sample[committed_keys[0]]
                if any(not sample[k].same_value(first) for k in committed_keys[1:]):
                    self._halt(f"conflicting committed reports at index {index}")
                    return
                # Stamps on one committed value can differ if a recovery
                # restamped it while its pronouncer was away; converge on
                # the newest stamp.
                chosen = max(committed_keys, key=lambda k: sample[k].term)
            else:
                # A candidate survives if the silent nodes could complete a
                # fast quorum for it, or if some leader already shipped it.
                qualifying = [
                    k
                    for k, vs in cands.items()
                    if len(vs) + slack >= fast_q or weight[k] >= 2
                ]
                chosen = max(
                    qualifying,
                    key=lambda k: (sample[k].term, weight[k], len(cands[k]), -sample[k].proposer),
                    default=None,
                )
            if chosen is None:
                filler = LogEntry(
                    index, self.current_term, NOOP, EntryStatus.ACCEPTED_CLASSIC, self.id
                )
                self._log_put(filler)
                self._origin_track[index] = "noop"
                kept_rank[index] = (0, self.current_term)
            elif (
                local is not None
                and local.status is not EntryStatus.TENTATIVE_FAST
                and local.key() == chosen
            ):
                # Already ours non-tentatively, so a prior leader shipped
                # it; the stamp must survive in case it committed anywhere.
                self._origin_track.setdefault(index, "classic")
                kept_rank[index] = (max(weight[chosen], 2), local.term)
            else:
                source = sample[chosen]
                if weight[chosen] == 3:
                    # A committed report is final, stamp and all.
                    entry = source.with_status(EntryStatus.ACCEPTED_CLASSIC)
                else:
                    # Adopting makes the entry this leader's own.  Restamp
                    # it so that a term match at an index keeps naming
                    # exactly one entry; an unstamped adoption could alias
                    # a different same-term entry left on a stale peer.
                    entry = LogEntry(
                        index,
                        self.current_term,
                        source.command,
                        EntryStatus.ACCEPTED_CLASSIC,
                        source.proposer,
                    )
                self._log_put(entry)
                self._origin_track.setdefault(
                    index, "fallback" if weight[chosen] == 1 else "classic"
                )
                kept_rank[index] = (weight[chosen], entry.term)
            for key in cands:
                if key != chosen and sample[key].command:
                    requeue.append(sample[key].command)

        self._sweep_duplicates(kept_rank)
        if self.halted is not None:
            return
        for command in requeue:
            if command not in self._commands_seen:
                entry = LogEntry(
                    self._max_index + 1,
                    self.current_term,
                    command,
                    EntryStatus.ACCEPTED_CLASSIC,
                    self.id,
                )
                self._log_put(entry)
                self._origin_track[entry.index] = "fallback"
        self._frontier = self._recover_frontier()

    def _sweep_duplicates(self, kept_rank: dict[int, tuple[int, int]]) -> None:
        """Reduce every command to a single slot after recovery.

        Adopted candidates and inherited classic entries may duplicate a
        command that is already placed; only one copy may survive, ranked
        by commit status, then term, then slot.  An uncommitted duplicate
        of a committed command can never itself have been finalized, so
        replacing it with a no-op is safe.
        """
        best: dict[bytes, int] = {}
        rank_of: dict[int, tuple[int, int]] = {}
        for index in range(1, self._max_index + 1):
            entry = self.log.get(index)
            if entry is None or not entry.command:
                continue
            if entry.status is EntryStatus.COMMITTED:
                rank = (4, entry.term)
            else:
                rank = kept_rank.get(index, (2, entry.term))
            rank_of[index] = rank
            holder = best.get(entry.command)
            if holder is None or (rank, index) > (rank_of[holder], holder):
                best[entry.command] = index
        for index in range(self.commit_index + 1, self._max_index + 1):
            entry = self.log.get(index)
            if entry is None or not entry.command:
                continue
            keeper = best[entry.command]
            if keeper == index:
                continue
            if entry.status is EntryStatus.COMMITTED:
                self._halt(
                    f"command committed at {index} duplicates slot {keeper}"
                )
                return
            filler = LogEntry(index, self.current_term, NOOP, EntryStatus.ACCEPTED_CLASSIC, self.id)
            self._log_put(filler)
            self._origin_track[index] = "noop"

    # ------------------------------------------------------------------
    # introspection

    def state_key(self) -> tuple:
        slots = tuple(
            (
                s.index,
                s.resolved,
                tuple(sorted((pid, tuple(sorted(c.accepts))) for pid, c in s.candidates.items())),
                tuple(sorted(s.voters)),
            )
            for s in (self.slots[i] for i in sorted(self.slots))
        )
        return super().state_key() + (
            self.approved,
            self.approved_epoch,
            self.fast_floor,
            self.proposal_seq,
            slots,
            tuple(sorted(self.store.fast_votes.items())),
        )
