"""ALVR-style video traffic: one frame per 1/fps, each sent as a single burst."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .model import (
    BYTE,
    HEADER_BITS,
    MAX_PAYLOAD_BITS,
    NS_PER_S,
    PREFIX_BITS,
    PacketRecord,
    fragment_frame,
)

TRACKING_PACKETS_PER_FRAME = 3
TRACKING_PACKET_BITS = 207 * BYTE
AUDIO_PERIOD_S = 0.010


@dataclass(frozen=True)
class TrafficConfig:
    fps: float = 90.0
    sigma_rel: float = 0.0
    large_frame_factor: float = 1.0
    large_frame_period: int = 0
    max_packet_payload_bits: int = MAX_PAYLOAD_BITS
    header_bits: int = HEADER_BITS
    prefix_bits: int = PREFIX_BITS
    include_tracking_uplink: bool = False
    audio_bitrate_bps: float = 0.0

    def __post_init__(self):
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        if self.sigma_rel < 0:
            raise ValueError("sigma_rel must be non-negative")
        if self.large_frame_factor <= 0 or self.large_frame_period < 0:
            raise ValueError("large-frame factor must be positive and period non-negative")
        if self.max_packet_payload_bits <= 0:
            raise ValueError("max_packet_payload_bits must be positive")
        if self.audio_bitrate_bps < 0:
            raise ValueError("audio_bitrate_bps must be non-negative")

    @property
    def overhead_bits(self) -> int:
        return self.header_bits + self.prefix_bits

    def frame_departure_ns(self, k, start_ns: int = 0):
        """Departure of the k-th frame (k = 0, 1, ...): ``start + floor(k / fps)`` in ns."""
        rate = Fraction(self.fps).limit_denominator(10**6)
        return start_ns + (np.asarray(k, np.int64) * (NS_PER_S * rate.denominator)) // rate.numerator

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrafficConfig:
        return cls(**d)


def frame_payload_bits(traffic: TrafficConfig, bitrate_bps: float, frame_index, rng=None) -> np.ndarray:
    """Payload sizes (whole bytes, in bits) for the given frame indices."""
    frame_index = np.atleast_1d(np.asarray(frame_index, np.int64))
    scale = np.ones(len(frame_index))
    if traffic.sigma_rel > 0:
        if rng is None:
            raise ValueError("a random generator is needed when sigma_rel > 0")
        scale = np.maximum(1.0 + traffic.sigma_rel * rng.standard_normal(len(frame_index)), 0.05)
    if traffic.large_frame_period > 0:
        scale = np.where(frame_index % traffic.large_frame_period == 0, scale * traffic.large_frame_factor, scale)
    nbytes = np.maximum(np.rint(bitrate_bps / traffic.fps / BYTE * scale), 1).astype(np.int64)
    return nbytes * BYTE


def generate_frame(traffic: TrafficConfig, target_bitrate: float, frame_index: int, now_ns: int,
                   first_seq: int = 0, rng=None) -> list[PacketRecord]:
    """Packet burst of one frame, all stamped with departure ``now_ns``."""
    if not target_bitrate > 0:
        raise ValueError("target_bitrate must be positive")
    payload = int(frame_payload_bits(traffic, target_bitrate, frame_index, rng)[0])
    return fragment_frame(frame_index, payload, traffic.max_packet_payload_bits,
                          traffic.header_bits, traffic.prefix_bits, now_ns, first_seq)


def burst_arrays(payload_bits: np.ndarray, max_packet_payload_bits: int):
    """Vectorized fragmentation of several frames.

    Returns ``(frame_pos, index_in_frame, n_packets, packet_payload_bits)``
    where ``frame_pos`` indexes ``payload_bits``.
    """
    payload_bits = np.asarray(payload_bits, np.int64)
    n = -(-payload_bits // max_packet_payload_bits)
    total = int(n.sum())
    frame_pos = np.repeat(np.arange(len(n)), n)
    starts = np.cumsum(n) - n
    index_in_frame = np.arange(total) - starts[frame_pos] + 1
    n_packets = n[frame_pos]
    last = payload_bits - (n - 1) * max_packet_payload_bits
    pay = np.where(index_in_frame == n_packets, last[frame_pos], max_packet_payload_bits)
    return frame_pos, index_in_frame, n_packets, pay
