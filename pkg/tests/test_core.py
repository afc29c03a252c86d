"""Value types: quorum arithmetic, entry identity, codecs, config checks."""

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fastraft.core import (
    ClusterConfig,
    EntryStatus,
    InvalidConfigError,
    LogEntry,
    PersistentState,
    classic_quorum_size,
    decode_entry,
    decode_snapshot,
    double_fast_overlap_holds,
    encode_entry,
    encode_snapshot,
    entry_conflicts,
    fast_quorum_size,
    quorum_overlap,
)

# ----------------------------------------------------------------------
# quorum arithmetic


def test_quorum_pinned_values():
    assert fast_quorum_size(1) == 1
    assert fast_quorum_size(3) == 3
    assert fast_quorum_size(4) == 3
    assert fast_quorum_size(5) == 4
    assert classic_quorum_size(1) == 1
    assert classic_quorum_size(3) == 2
    assert classic_quorum_size(5) == 3


def test_quorum_closed_forms_all_sizes():
    for m in range(1, 101):
        assert fast_quorum_size(m) == math.ceil(3 * m / 4)
        assert classic_quorum_size(m) == m // 2 + 1
        assert fast_quorum_size(m) >= classic_quorum_size(m)


def test_quorum_rejects_empty_cluster():
    with pytest.raises(InvalidConfigError):
        fast_quorum_size(0)
    with pytest.raises(InvalidConfigError):
        classic_quorum_size(0)


def test_fast_and_classic_quorums_always_intersect():
    # Any fast quorum and any classic quorum share at least one node.
    for m in range(1, 101):
        overlap = fast_quorum_size(m) + classic_quorum_size(m) - m
        assert quorum_overlap(m) == overlap
        assert overlap >= 1


def test_double_fast_overlap_audit():
    # Two fast quorums overlap in a classic quorum except when 4 | M;
    # the audit records the truth value rather than assuming it.
    for m in range(1, 101):
        expected = 2 * fast_quorum_size(m) - m >= classic_quorum_size(m)
        assert double_fast_overlap_holds(m) == expected
        assert expected == (m % 4 != 0)


def test_recovery_tiebreak_margin():
    # A pronounced value always out-counts a same-term rival during
    # recovery: holders + slack >= fast_q for the pronounced value while
    # the rival reaches at most M - fast_q + slack, and the gap is >= 1
    # whenever a classic quorum of reports is in hand.
    for m in range(1, 101):
        fast_q = fast_quorum_size(m)
        classic_q = classic_quorum_size(m)
        assert 2 * fast_q - 2 * m + classic_q >= 1


# ----------------------------------------------------------------------
# entry identity

E1 = LogEntry(5, 2, b"a", EntryStatus.ACCEPTED_CLASSIC, 1)


def test_entry_conflicts_examples():
    assert not entry_conflicts(E1, E1)
    assert entry_conflicts(E1, LogEntry(5, 2, b"b", EntryStatus.ACCEPTED_CLASSIC, 1))
    assert entry_conflicts(E1, LogEntry(5, 3, b"a", EntryStatus.ACCEPTED_CLASSIC, 1))
    assert entry_conflicts(E1, LogEntry(5, 2, b"a", EntryStatus.ACCEPTED_CLASSIC, 2))
    assert not entry_conflicts(E1, LogEntry(6, 9, b"z", EntryStatus.COMMITTED, 0))


def test_entry_conflicts_ignores_status():
    assert not entry_conflicts(E1, E1.with_status(EntryStatus.COMMITTED))


entries = st.builds(
    LogEntry,
    index=st.integers(min_value=1, max_value=50),
    term=st.integers(min_value=0, max_value=20),
    command=st.binary(max_size=8),
    status=st.sampled_from(list(EntryStatus)),
    proposer=st.integers(min_value=-1, max_value=6),
)


@given(entries, entries)
def test_entry_conflicts_symmetric(a, b):
    assert entry_conflicts(a, b) == entry_conflicts(b, a)


@given(entries)
def test_entry_conflicts_irreflexive(a):
    assert not entry_conflicts(a, a)


def test_same_value_tolerates_restamp():
    restamped = LogEntry(5, 7, b"a", EntryStatus.ACCEPTED_CLASSIC, 1)
    assert E1.same_value(restamped)
    assert not E1.same_value(LogEntry(5, 2, b"a", EntryStatus.ACCEPTED_CLASSIC, 2))


# ----------------------------------------------------------------------
# codecs


def test_encode_entry_format():
    entry = LogEntry(3, 2, b"\x01\xff", EntryStatus.ACCEPTED_CLASSIC, 1)
    assert encode_entry(entry) == "3|2|1|ACCEPTED_CLASSIC|01ff"


@given(entries)
def test_entry_codec_roundtrip(entry):
    assert decode_entry(encode_entry(entry)) == entry


def test_decode_entry_rejects_garbage():
    with pytest.raises(ValueError):
        decode_entry("not an entry")


def test_snapshot_roundtrip():
    state = PersistentState(
        current_term=4,
        voted_for=2,
        log={
            1: LogEntry(1, 1, b"", EntryStatus.COMMITTED, 0),
            2: LogEntry(2, 3, b"cmd", EntryStatus.TENTATIVE_FAST, 1),
        },
        fast_votes={2: (3, (1, 7))},
    )
    back = decode_snapshot(encode_snapshot(state))
    assert back == state


def test_snapshot_roundtrip_empty_vote():
    state = PersistentState(current_term=0, voted_for=None)
    back = decode_snapshot(encode_snapshot(state))
    assert back == state


def test_snapshot_rejects_empty_text():
    with pytest.raises(ValueError):
        decode_snapshot("")


# ----------------------------------------------------------------------
# cluster config


def test_config_quorums_follow_size():
    cfg = ClusterConfig(members=(0, 1, 2, 3, 4))
    assert cfg.size == 5
    assert cfg.classic_quorum() == 3
    assert cfg.fast_quorum() == 4


@pytest.mark.parametrize(
    "kwargs",
    [
        {"members": ()},
        {"members": (0, 0, 1)},
        {"members": (0, 1, 2), "election_timeout": (300.0, 150.0)},
        {"members": (0, 1, 2), "election_timeout": (90.0, 300.0)},
        {"members": (0, 1, 2), "fast_vote_timeout": 0.0},
        {"members": (0, 1, 2), "fast_eligible": (0, 9)},
    ],
)
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(InvalidConfigError):
        ClusterConfig(**kwargs)


def test_config_fast_eligible_subset_ok():
    cfg = ClusterConfig(members=(0, 1, 2), fast_eligible=(0, 1))
    assert cfg.fast_eligible == (0, 1)
