"""Packet, frame and clock types shared by the generator, link, metrics and trace I/O.

All timestamps are integer nanoseconds. Server-clock values are suffixed
``_ns`` and client-clock values carry ``client`` in their name; the client
clock is the server clock shifted by a constant offset.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

BYTE = 8
NS_PER_S = 1_000_000_000

MAX_PAYLOAD_BITS = 1400 * BYTE
HEADER_BITS = 28 * BYTE
PREFIX_BITS = 18 * BYTE
STATS_FEEDBACK_BITS = 56 * BYTE


class InvalidFrameError(ValueError):
    pass


class FrameStatus(str, enum.Enum):
    IN_PROGRESS = "in-progress"
    COMPLETE = "complete"
    ABANDONED = "abandoned"


@dataclass(frozen=True)
class Clocks:
    """Server/client clock pair; ``client = server + offset_ns``."""

    offset_ns: int = 0

    def to_client(self, server_ns: int) -> int:
        return server_ns + self.offset_ns

    def to_server(self, client_ns: int) -> int:
        return client_ns - self.offset_ns


@dataclass(slots=True)
class PacketRecord:
    seq: int
    frame_index: int
    index_in_frame: int
    n_packets_in_frame: int
    payload_bits: int
    header_bits: int
    prefix_bits: int
    departure_ns: int
    arrival_client_ns: int | None = None

    @property
    def total_bits(self) -> int:
        return self.header_bits + self.prefix_bits + self.payload_bits


@dataclass(slots=True)
class FrameAssembly:
    """Reception state of one video frame.

    Packets may be added in any order; duplicates must be filtered by the
    caller (the metrics engine dedupes on sequence number).
    """

    frame_index: int
    n_packets: int
    first_departure_ns: int
    received: int = 0
    first_arrival_ns: int | None = None
    last_arrival_ns: int | None = None
    payload_bits_total: int = 0
    total_bits_total: int = 0
    status: FrameStatus = FrameStatus.IN_PROGRESS
    received_index: set[int] = field(default_factory=set)

    def add(self, packet: PacketRecord, arrival_client_ns: int) -> bool:
        """Record one packet arrival; return True when this completes the frame."""
        if packet.frame_index != self.frame_index:
            raise InvalidFrameError(
                f"packet of frame {packet.frame_index} added to frame {self.frame_index}")
        if packet.index_in_frame in self.received_index:
            return False
        self.received_index.add(packet.index_in_frame)
        self.received += 1
        if self.first_arrival_ns is None or arrival_client_ns < self.first_arrival_ns:
            self.first_arrival_ns = arrival_client_ns
        if self.last_arrival_ns is None or arrival_client_ns > self.last_arrival_ns:
            self.last_arrival_ns = arrival_client_ns
        self.payload_bits_total += packet.payload_bits
        self.total_bits_total += packet.total_bits
        if self.received == self.n_packets:
            self.status = FrameStatus.COMPLETE
            return True
        return False

    @property
    def complete(self) -> bool:
        return self.status is FrameStatus.COMPLETE

    @property
    def completion_ns(self) -> int | None:
        return self.last_arrival_ns if self.complete else None


@dataclass(frozen=True, slots=True)
class StatsFeedback:
    frame_index: int
    sent_client_ns: int
    arrival_server_ns: int
    size_bits: int = STATS_FEEDBACK_BITS


def fragment_frame(
    frame_index: int,
    frame_payload_bits: int,
    max_packet_payload_bits: int = MAX_PAYLOAD_BITS,
    header_bits: int = HEADER_BITS,
    prefix_bits: int = PREFIX_BITS,
    departure_ns: int = 0,
    first_seq: int = 0,
) -> list[PacketRecord]:
    """Split a frame payload into a single burst of packets.

    All packets carry ``departure_ns``. Sequence numbers start at
    ``first_seq`` when given, otherwise stay 0 until
    :func:`assign_sequence_numbers`.
    """
    if frame_payload_bits <= 0:
        raise InvalidFrameError(f"frame {frame_index}: payload must be positive, got {frame_payload_bits}")
    if max_packet_payload_bits <= 0:
        raise InvalidFrameError(f"max packet payload must be positive, got {max_packet_payload_bits}")
    n = math.ceil(frame_payload_bits / max_packet_payload_bits)
    last = frame_payload_bits - (n - 1) * max_packet_payload_bits
    packets = []
    for i in range(1, n + 1):
        packets.append(PacketRecord(
            seq=first_seq + i - 1 if first_seq else 0,
            frame_index=frame_index,
            index_in_frame=i,
            n_packets_in_frame=n,
            payload_bits=max_packet_payload_bits if i < n else last,
            header_bits=header_bits,
            prefix_bits=prefix_bits,
            departure_ns=departure_ns,
        ))
    return packets


def assign_sequence_numbers(frames: list[list[PacketRecord]]) -> list[list[PacketRecord]]:
    """Number packets 1, 2, ... across frames in transmission order (in place)."""
    seq = 0
    for packets in frames:
        for p in packets:
            seq += 1
            p.seq = seq
    return frames


def packet_count(frame_payload_bits: int, max_packet_payload_bits: int = MAX_PAYLOAD_BITS) -> int:
    return -(-frame_payload_bits // max_packet_payload_bits)
