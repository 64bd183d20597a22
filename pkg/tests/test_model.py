"""Core model: fragmentation, sequence numbering, frame assembly and clocks."""

import pytest
from hypothesis import given
from hypothesis import strategies as st

from nestsim.model import (
    HEADER_BITS,
    MAX_PAYLOAD_BITS,
    PREFIX_BITS,
    Clocks,
    FrameAssembly,
    FrameStatus,
    InvalidFrameError,
    assign_sequence_numbers,
    fragment_frame,
    packet_count,
)


def test_constants_match_observed_packet_sizes():
    assert MAX_PAYLOAD_BITS == 1400 * 8
    assert (MAX_PAYLOAD_BITS + HEADER_BITS + PREFIX_BITS) // 8 == 1446
    assert HEADER_BITS == 28 * 8 and PREFIX_BITS == 18 * 8


def test_fragment_even_division():
    pk = fragment_frame(1, 33600, 11200, 368, 368, 0)
    assert [p.payload_bits for p in pk] == [11200, 11200, 11200]


def test_fragment_remainder():
    pk = fragment_frame(1, 30000, 11200, 368, 368, 0)
    assert [p.payload_bits for p in pk] == [11200, 11200, 7600]
    assert [p.index_in_frame for p in pk] == [1, 2, 3]
    assert all(p.n_packets_in_frame == 3 for p in pk)


def test_fragment_single_bit():
    pk = fragment_frame(1, 1, 11200, 368, 368, 0)
    assert len(pk) == 1 and pk[0].payload_bits == 1


def test_fragment_shares_departure_and_totals():
    pk = fragment_frame(4, 30000, 11200, 368, 368, 123_456)
    assert {p.departure_ns for p in pk} == {123_456}
    assert all(p.total_bits == p.payload_bits + 736 for p in pk)


@pytest.mark.parametrize("payload", [0, -8])
def test_fragment_rejects_empty_payload(payload):
    with pytest.raises(InvalidFrameError):
        fragment_frame(1, payload)


def test_fragment_rejects_bad_max_payload():
    with pytest.raises(InvalidFrameError):
        fragment_frame(1, 100, 0)


@given(st.integers(1, 10**7), st.integers(1, 20_000))
def test_fragment_round_trip(payload, max_payload):
    pk = fragment_frame(1, payload, max_payload)
    assert sum(p.payload_bits for p in pk) == payload
    assert len(pk) == packet_count(payload, max_payload)
    assert all(p.payload_bits == max_payload for p in pk[:-1])
    assert 0 < pk[-1].payload_bits <= max_payload


def _frames(sizes):
    return [fragment_frame(f, n * 100, 100) for f, n in enumerate(sizes, start=1)]


def test_sequence_numbers_two_frames():
    frames = assign_sequence_numbers(_frames([3, 2]))
    assert [p.seq for fr in frames for p in fr] == [1, 2, 3, 4, 5]


def test_sequence_numbers_single_packet():
    frames = assign_sequence_numbers(_frames([1]))
    assert [p.seq for p in frames[0]] == [1]


def test_sequence_numbers_third_frame():
    frames = assign_sequence_numbers(_frames([2, 2, 2]))
    assert [p.seq for p in frames[2]] == [5, 6]


@given(st.lists(st.integers(1, 30), min_size=1, max_size=30))
def test_sequence_formula(sizes):
    frames = assign_sequence_numbers(_frames(sizes))
    for f, fr in enumerate(frames):
        for p in fr:
            assert p.seq == p.index_in_frame + sum(sizes[:f])


def test_fragment_first_seq():
    pk = fragment_frame(2, 300, 100, first_seq=7)
    assert [p.seq for p in pk] == [7, 8, 9]


def test_assembly_completion_out_of_order():
    pk = fragment_frame(1, 300, 100)
    fa = FrameAssembly(1, 3, 0)
    assert not fa.add(pk[2], 30)
    assert not fa.add(pk[0], 10)
    assert fa.completion_ns is None
    assert fa.add(pk[1], 20)
    assert fa.status is FrameStatus.COMPLETE
    assert fa.completion_ns == 30 and fa.first_arrival_ns == 10
    assert fa.payload_bits_total == 300
    assert fa.total_bits_total == sum(p.total_bits for p in pk)


def test_assembly_ignores_repeated_packet():
    pk = fragment_frame(1, 200, 100)
    fa = FrameAssembly(1, 2, 0)
    fa.add(pk[0], 5)
    assert not fa.add(pk[0], 6)
    assert fa.received == 1 and fa.status is FrameStatus.IN_PROGRESS


def test_assembly_rejects_foreign_packet():
    fa = FrameAssembly(1, 2, 0)
    with pytest.raises(InvalidFrameError):
        fa.add(fragment_frame(2, 100)[0], 0)


@given(st.integers(-10**12, 10**12), st.integers(0, 10**15))
def test_clocks_round_trip(offset, t):
    c = Clocks(offset)
    assert c.to_server(c.to_client(t)) == t
    assert c.to_client(t) - t == offset
