"""Per-frame network metrics computed at frame completion.

The pure functions take frames/contexts and return values in seconds or
bits/second. :class:`MetricsEngine` is the streaming state machine that
feeds packets through frame assembly and emits one :class:`FrameMetrics`
per completely and timely received frame.

Time arithmetic is done on integer nanoseconds and converted to seconds
last, so metrics built purely from clock differences are exact and
invariant under a constant client clock offset.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass

import numpy as np

from . import _kernels as K

from .model import (
    HEADER_BITS,
    NS_PER_S,
    PREFIX_BITS,
    FrameAssembly,
    FrameStatus,
    PacketRecord,
    StatsFeedback,
)

METRIC_NAMES = (
    "frame_span_s",
    "frame_interarrival_s",
    "vf_rtt_s",
    "packet_loss_count",
    "packet_loss_ratio",
    "throughput_bps",
    "peak_throughput_bps",
    "frame_jitter_s",
    "packet_jitter_s",
    "owd_gradient_s",
    "fowd_s",
)

KALMAN_STATE_NOISE = 1e-7
KALMAN_NOISE_SMOOTHING = 0.05
KALMAN_NOISE_FLOOR = 1e-9
KALMAN_INITIAL_ERROR = 0.1
KALMAN_INITIAL_NOISE = 5e-5

DEFAULT_DEADLINE_S = 0.050
DEFAULT_JITTER_WINDOW = 16


class NotCompleteError(ValueError):
    pass


class OrderingError(ValueError):
    pass


class PairingError(ValueError):
    pass


class UndefinedSampleError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class MetricSample:
    name: str
    frame_index: int
    value: float
    time_ns: int
    flag: str = ""


@dataclass(slots=True)
class FrameCompletionContext:
    current: FrameAssembly
    previous: FrameAssembly | None
    hseq_current: int
    hseq_previous: int
    interval_packets: int
    interval_bits: int


def _s(ns: int) -> float:
    return ns / NS_PER_S


def frame_span(frame: FrameAssembly) -> float:
    if not frame.complete:
        raise NotCompleteError(f"frame {frame.frame_index} is {frame.status.value}")
    return _s(frame.last_arrival_ns - frame.first_arrival_ns)


def frame_interarrival(current: FrameAssembly, previous: FrameAssembly) -> float:
    return _s(_interarrival_ns(current, previous))


def _interarrival_ns(current: FrameAssembly, previous: FrameAssembly) -> int:
    if not (current.complete and previous.complete):
        raise NotCompleteError("both frames must be complete")
    gap = current.last_arrival_ns - previous.last_arrival_ns
    if gap < 0:
        raise OrderingError(
            f"frame {current.frame_index} completed before frame {previous.frame_index}")
    return gap


def vf_rtt(frame: FrameAssembly, feedback: StatsFeedback) -> float:
    if feedback.frame_index != frame.frame_index:
        raise PairingError(f"feedback for frame {feedback.frame_index} paired with frame {frame.frame_index}")
    return _s(feedback.arrival_server_ns - frame.first_departure_ns)


def packet_loss(ctx: FrameCompletionContext) -> tuple[int, float, bool]:
    """Return ``(lost, ratio, clamped)``.

    ``clamped`` is set when more packets were received than the sequence
    span accounts for (duplicates or late reordered packets); the loss is
    then reported as zero.
    """
    expected = ctx.hseq_current - ctx.hseq_previous
    lost = expected - ctx.interval_packets
    clamped = lost < 0
    if clamped:
        lost = 0
    ratio = lost / expected if expected > 0 else 0.0
    return lost, ratio, clamped


def instantaneous_throughput(ctx: FrameCompletionContext) -> float:
    gap = _interarrival_ns(ctx.current, ctx.previous)
    if gap <= 0:
        raise UndefinedSampleError("zero frame inter-arrival")
    return ctx.interval_bits / _s(gap)


def peak_throughput(frame: FrameAssembly) -> float:
    if not frame.complete:
        raise NotCompleteError(f"frame {frame.frame_index} is {frame.status.value}")
    span = frame.last_arrival_ns - frame.first_arrival_ns
    if span <= 0:
        raise UndefinedSampleError(f"frame {frame.frame_index} has zero span")
    return frame.total_bits_total / _s(span)


def frame_jitter(window) -> float:
    """Sample standard deviation (divisor w-1) of frame inter-arrival times."""
    if len(window) < 2:
        raise UndefinedSampleError("frame jitter needs at least two inter-arrivals")
    return statistics.stdev(window)


def owd_gradient(ctx: FrameCompletionContext) -> float:
    return _s(_owd_ns(ctx.current, ctx.previous))


def _owd_ns(current: FrameAssembly, previous: FrameAssembly) -> int:
    return _interarrival_ns(current, previous) - (current.first_departure_ns - previous.first_departure_ns)


@dataclass(slots=True)
class JitterState:
    """RFC 3550 inter-arrival jitter; internal value kept in nanoseconds."""

    jitter_ns: float = 0.0
    last_arrival_ns: int | None = None
    last_departure_ns: int | None = None

    @property
    def packet_jitter(self) -> float:
        return self.jitter_ns / NS_PER_S


def packet_jitter_update(state: JitterState, packet: PacketRecord) -> float:
    arrival = packet.arrival_client_ns
    if arrival is None:
        raise ValueError(f"packet {packet.seq} has no arrival time")
    if state.last_arrival_ns is not None:
        d = (arrival - state.last_arrival_ns) - (packet.departure_ns - state.last_departure_ns)
        state.jitter_ns += (abs(d) - state.jitter_ns) / 16.0
    state.last_arrival_ns = arrival
    state.last_departure_ns = packet.departure_ns
    return state.packet_jitter


@dataclass(slots=True)
class KalmanState:
    estimate: float = 0.0
    error_variance: float = KALMAN_INITIAL_ERROR
    measurement_noise_variance: float = KALMAN_INITIAL_NOISE
    state_noise_variance: float = KALMAN_STATE_NOISE


def kalman_update(state: KalmanState, raw_gradient: float) -> float:
    """Scalar random-walk Kalman step; returns the filtered gradient.

    The measurement noise tracks an EMA of squared innovations.
    """
    innovation = raw_gradient - state.estimate
    noise = ((1.0 - KALMAN_NOISE_SMOOTHING) * state.measurement_noise_variance
             + KALMAN_NOISE_SMOOTHING * innovation * innovation)
    if noise < KALMAN_NOISE_FLOOR:
        noise = KALMAN_NOISE_FLOOR
    state.measurement_noise_variance = noise
    prior = state.error_variance + state.state_noise_variance
    gain = prior / (prior + noise)
    state.estimate = state.estimate + gain * innovation
    state.error_variance = (1.0 - gain) * prior
    return state.estimate


@dataclass(slots=True)
class FrameMetrics:
    """Everything emitted for one completed frame; ``None`` marks an undefined sample."""

    frame_index: int
    prev_index: int | None
    completion_client_ns: int
    first_departure_ns: int
    payload_bits: int
    total_bits: int
    frame_span_s: float
    peak_throughput_bps: float | None = None
    frame_interarrival_s: float | None = None
    packet_loss_count: int | None = None
    packet_loss_ratio: float | None = None
    loss_clamped: bool = False
    throughput_bps: float | None = None
    frame_jitter_s: float | None = None
    packet_jitter_s: float | None = None
    owd_gradient_s: float | None = None
    fowd_s: float | None = None
    vf_rtt_s: float | None = None
    feedback_server_ns: int | None = None

    def samples(self) -> list[MetricSample]:
        out = []
        t = self.completion_client_ns
        for name in METRIC_NAMES:
            if name == "vf_rtt_s":
                continue
            value = getattr(self, name)
            if value is None:
                continue
            flag = "clamped" if name == "packet_loss_count" and self.loss_clamped else ""
            out.append(MetricSample(name, self.frame_index, value, t, flag))
        if self.vf_rtt_s is not None:
            out.append(MetricSample("vf_rtt_s", self.frame_index, self.vf_rtt_s, self.feedback_server_ns))
        return out


class FrameTable:
    """Columnar per-frame metrics for completed frames.

    Integer time columns are nanoseconds on the client clock; undefined
    float samples are NaN and ``prev_index`` is -1 for the first frame.
    """

    COLUMNS = {
        "frame_index": np.int64, "prev_index": np.int64, "first_arrival_ns": np.int64,
        "completion_client_ns": np.int64, "first_departure_ns": np.int64,
        "total_bits": np.int64, "n_packets": np.int64, "hseq": np.int64,
        "interval_packets": np.int64, "interval_bits": np.int64, "span_ns": np.int64,
        "peak_bps": np.float64, "interarrival_ns": np.int64, "lost": np.int64,
        "loss_ratio": np.float64, "loss_clamped": np.bool_, "throughput_bps": np.float64,
        "frame_jitter_s": np.float64, "packet_jitter_ns": np.float64, "owd_ns": np.int64,
        "fowd_s": np.float64,
    }

    def __init__(self, **columns):
        n = None
        for name, dtype in self.COLUMNS.items():
            col = columns.get(name)
            col = np.zeros(0, dtype) if col is None else np.asarray(col, dtype)
            if n is None:
                n = len(col)
            elif len(col) != n:
                raise ValueError(f"column {name} has {len(col)} rows, expected {n}")
            setattr(self, name, col)

    @classmethod
    def empty(cls) -> FrameTable:
        return cls()

    @classmethod
    def concat(cls, tables) -> FrameTable:
        tables = list(tables)
        if not tables:
            return cls()
        if len(tables) == 1:
            return tables[0]
        return cls(**{name: np.concatenate([getattr(t, name) for t in tables]) for name in cls.COLUMNS})

    def __len__(self) -> int:
        return len(self.frame_index)

    @property
    def has_prev(self) -> np.ndarray:
        return self.prev_index >= 0


def _opt(x: float) -> float | None:
    return None if math.isnan(x) else float(x)


class MetricsEngine:
    """Streaming frame assembly plus metric computation for one video stream.

    Packets must be offered in non-decreasing client arrival time, either
    one at a time (:meth:`on_arrival`) or in sorted batches
    (:meth:`on_batch`, much faster). A frame counts as timely when it
    completes before any higher-indexed frame and within ``deadline_s`` of
    its first packet; every other frame that received at least one packet
    ends up in :attr:`abandoned`. Duplicate sequence numbers are discarded
    on arrival (first copy wins) and counted in :attr:`duplicates`.
    """

    def __init__(self, *, deadline_s: float = DEFAULT_DEADLINE_S,
                 jitter_window: int = DEFAULT_JITTER_WINDOW,
                 overhead_bits: int = HEADER_BITS + PREFIX_BITS):
        if jitter_window < 2:
            raise ValueError("jitter_window must be >= 2")
        if deadline_s <= 0:
            raise ValueError("deadline_s must be positive")
        self.deadline_ns = round(deadline_s * NS_PER_S)
        self.jitter_window = jitter_window
        self.overhead_bits = overhead_bits

        self._st = np.zeros(K.ST_SIZE, np.int64)
        self._st[K.ST_LAST_COMPLETED] = -1
        self._jitter = np.zeros(1)
        self._seen = np.zeros(1024, np.uint8)
        self._fstatus = np.zeros(256, np.int8)
        self._freceived = np.zeros(256, np.int64)
        self._fnpk = np.zeros(256, np.int64)
        self._ffirst = np.zeros(256, np.int64)
        self._fdep = np.zeros(256, np.int64)
        self._fbits = np.zeros(256, np.int64)
        self._ds = np.zeros(K.DS_SIZE, np.int64)
        self._ring = np.zeros(jitter_window, np.int64)
        self._kal = np.array([0.0, KALMAN_INITIAL_ERROR, KALMAN_INITIAL_NOISE])
        self._last_arrival: int | None = None

        self._tables: list[FrameTable] = []
        self._feedback: dict[int, int] = {}
        self._cache: list[FrameMetrics] | None = None

    # ingestion

    def _grow(self, max_seq: int, max_frame: int) -> None:
        if max_seq >= len(self._seen):
            seen = np.zeros(max(2 * len(self._seen), max_seq + 1), np.uint8)
            seen[:len(self._seen)] = self._seen
            self._seen = seen
        if max_frame >= len(self._fstatus):
            size = max(2 * len(self._fstatus), max_frame + 1)
            for name in ("_fstatus", "_freceived", "_fnpk", "_ffirst", "_fdep", "_fbits"):
                old = getattr(self, name)
                new = np.zeros(size, old.dtype)
                new[:len(old)] = old
                setattr(self, name, new)

    def on_batch(self, seq, frame_index, n_packets, total_bits, departure_ns, arrival_ns) -> FrameTable:
        """Process arrivals sorted by client time; return rows for frames completed in this batch."""
        seq = np.ascontiguousarray(seq, np.int64)
        n = len(seq)
        if n == 0:
            return FrameTable.empty()
        frame_index = np.ascontiguousarray(frame_index, np.int64)
        n_packets = np.ascontiguousarray(n_packets, np.int64)
        total_bits = np.ascontiguousarray(total_bits, np.int64)
        departure_ns = np.ascontiguousarray(departure_ns, np.int64)
        arrival_ns = np.ascontiguousarray(arrival_ns, np.int64)
        if seq.min() < 0 or frame_index.min() < 0:
            raise ValueError("sequence numbers and frame indices must be non-negative")
        if np.any(arrival_ns[1:] < arrival_ns[:-1]) or (
                self._last_arrival is not None and arrival_ns[0] < self._last_arrival):
            raise OrderingError("arrivals must be offered in non-decreasing client time")
        self._last_arrival = int(arrival_ns[-1])
        self._grow(int(seq.max()), int(frame_index.max()))

        i64 = lambda: np.empty(n, np.int64)  # noqa: E731
        o_frame, o_first, o_comp, o_dep, o_bits, o_npk = i64(), i64(), i64(), i64(), i64(), i64()
        o_hseq, o_hprev, o_ipk, o_ibits = i64(), i64(), i64(), i64()
        o_pj = np.empty(n)
        m = K.assemble(seq, frame_index, n_packets, total_bits, departure_ns, arrival_ns,
                       self.deadline_ns, self._st, self._jitter, self._seen, self._fstatus,
                       self._freceived, self._fnpk, self._ffirst, self._fdep, self._fbits,
                       o_frame, o_first, o_comp, o_dep, o_bits, o_npk,
                       o_hseq, o_hprev, o_ipk, o_ibits, o_pj)
        if m == 0:
            return FrameTable.empty()
        rows = dict(frame_index=o_frame[:m], first_arrival_ns=o_first[:m], completion_client_ns=o_comp[:m],
                    first_departure_ns=o_dep[:m], total_bits=o_bits[:m], n_packets=o_npk[:m],
                    hseq=o_hseq[:m], interval_packets=o_ipk[:m], interval_bits=o_ibits[:m],
                    packet_jitter_ns=o_pj[:m])
        out = {name: np.empty(m, dtype) for name, dtype in FrameTable.COLUMNS.items() if name not in rows}
        K.derive(rows["frame_index"], rows["first_arrival_ns"], rows["completion_client_ns"],
                 rows["first_departure_ns"], rows["total_bits"], rows["hseq"], o_hprev[:m],
                 rows["interval_packets"], rows["interval_bits"],
                 self._ds, self._ring, self._kal, KALMAN_STATE_NOISE, KALMAN_NOISE_SMOOTHING,
                 KALMAN_NOISE_FLOOR, out["prev_index"], out["span_ns"], out["peak_bps"],
                 out["interarrival_ns"], out["lost"], out["loss_ratio"], out["loss_clamped"],
                 out["throughput_bps"], out["frame_jitter_s"], out["owd_ns"], out["fowd_s"])
        table = FrameTable(**rows, **out)
        self._tables.append(table)
        self._cache = None
        return table

    def on_arrival(self, seq: int, frame_index: int, n_packets: int, total_bits: int,
                   departure_ns: int, arrival_ns: int) -> FrameMetrics | None:
        """Single-packet form of :meth:`on_batch`; returns metrics if the packet completed a frame."""
        t = self.on_batch([seq], [frame_index], [n_packets], [total_bits], [departure_ns], [arrival_ns])
        if not len(t):
            return None
        return self.by_frame[int(t.frame_index[0])]

    def on_packet(self, packet: PacketRecord, arrival_client_ns: int | None = None) -> FrameMetrics | None:
        t = packet.arrival_client_ns if arrival_client_ns is None else arrival_client_ns
        if t is None:
            raise ValueError(f"packet {packet.seq} has no arrival time")
        return self.on_arrival(packet.seq, packet.frame_index, packet.n_packets_in_frame,
                               packet.total_bits, packet.departure_ns, t)

    def on_feedback(self, feedback: StatsFeedback) -> MetricSample:
        f = feedback.frame_index
        if not (0 <= f < len(self._fstatus) and self._fstatus[f] == K.F_COMPLETE):
            raise PairingError(f"no completed frame {f} for feedback")
        self._feedback[f] = feedback.arrival_server_ns
        self._cache = None
        value = _s(feedback.arrival_server_ns - int(self._fdep[f]))
        return MetricSample("vf_rtt_s", f, value, feedback.arrival_server_ns)

    def on_frame_complete(self, frame, feedback: StatsFeedback | None = None) -> list[MetricSample]:
        """Samples for a frame (index or :class:`FrameAssembly`), pairing ``feedback`` if given.

        Frames that are not completely and timely received yield nothing.
        """
        f = frame.frame_index if isinstance(frame, FrameAssembly) else int(frame)
        if not (0 <= f < len(self._fstatus) and self._fstatus[f] == K.F_COMPLETE):
            return []
        if feedback is not None:
            self.on_feedback(feedback)
        return self.by_frame[f].samples()

    def finalize(self) -> None:
        """Mark frames still being assembled as abandoned (end of run)."""
        self._fstatus[self._fstatus == K.F_IN_PROGRESS] = K.F_ABANDONED

    # views

    def table(self) -> FrameTable:
        if len(self._tables) > 1:
            self._tables = [FrameTable.concat(self._tables)]
        return self._tables[0] if self._tables else FrameTable.empty()

    @property
    def feedback(self) -> dict[int, int]:
        return dict(self._feedback)

    @property
    def completed(self) -> list[FrameMetrics]:
        if self._cache is None:
            self._cache = self._build()
        return self._cache

    @property
    def by_frame(self) -> dict[int, FrameMetrics]:
        return {fm.frame_index: fm for fm in self.completed}

    def _build(self) -> list[FrameMetrics]:
        t = self.table()
        cols = {name: getattr(t, name).tolist() for name in FrameTable.COLUMNS}
        out = []
        for i in range(len(t)):
            f = cols["frame_index"][i]
            fm = FrameMetrics(
                frame_index=f,
                prev_index=None,
                completion_client_ns=cols["completion_client_ns"][i],
                first_departure_ns=cols["first_departure_ns"][i],
                payload_bits=cols["total_bits"][i] - cols["n_packets"][i] * self.overhead_bits,
                total_bits=cols["total_bits"][i],
                frame_span_s=_s(cols["span_ns"][i]),
                peak_throughput_bps=_opt(cols["peak_bps"][i]),
            )
            if cols["prev_index"][i] >= 0:
                fm.prev_index = cols["prev_index"][i]
                fm.frame_interarrival_s = _s(cols["interarrival_ns"][i])
                fm.packet_loss_count = cols["lost"][i]
                fm.packet_loss_ratio = cols["loss_ratio"][i]
                fm.loss_clamped = cols["loss_clamped"][i]
                fm.throughput_bps = _opt(cols["throughput_bps"][i])
                fm.frame_jitter_s = _opt(cols["frame_jitter_s"][i])
                fm.packet_jitter_s = cols["packet_jitter_ns"][i] / NS_PER_S
                fm.owd_gradient_s = _s(cols["owd_ns"][i])
                fm.fowd_s = cols["fowd_s"][i]
            fb = self._feedback.get(f)
            if fb is not None:
                fm.vf_rtt_s = _s(fb - fm.first_departure_ns)
                fm.feedback_server_ns = fb
            out.append(fm)
        return out

    @property
    def abandoned(self) -> set[int]:
        return set(np.flatnonzero(self._fstatus == K.F_ABANDONED).tolist())

    @property
    def duplicates(self) -> int:
        return int(self._st[K.ST_DUPLICATES])

    @property
    def received(self) -> int:
        return int(self._st[K.ST_RECEIVED])

    @property
    def packet_jitter_s(self) -> float:
        return float(self._jitter[0]) / NS_PER_S

    def samples(self) -> list[MetricSample]:
        out = []
        for fm in self.completed:
            out.extend(fm.samples())
        return out
