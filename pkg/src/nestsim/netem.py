"""Downlink emulator: access serialization, drop-tail bottleneck, loss, jitter, duplication.

Each session's packets are first serialized by its own sender NIC
(``access_rate_bps``), then share one FIFO bottleneck whose parameters come
from the scenario phase active at the packet's arrival there. After the
queue a packet is delayed by the propagation delay plus uniform jitter
(which may reorder), and may be cloned.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .model import BYTE, HEADER_BITS, MAX_PAYLOAD_BITS, NS_PER_S, PREFIX_BITS

DEFAULT_QUEUE_LIMIT_BYTES = 1000 * (MAX_PAYLOAD_BITS + HEADER_BITS + PREFIX_BITS) // BYTE

DROP_NONE = 0
DROP_RANDOM = 1
DROP_OVERFLOW = 2
DROP_REASONS = {DROP_NONE: "", DROP_RANDOM: "random", DROP_OVERFLOW: "overflow"}


def _ns(seconds: float) -> int:
    return round(seconds * NS_PER_S)


@dataclass(frozen=True)
class Phase:
    start_s: float
    duration_s: float
    capacity_bps: float = math.inf
    loss_prob: float = 0.0
    jitter_max_s: float = 0.0
    dup_prob: float = 0.0
    queue_limit_bytes: int | None = DEFAULT_QUEUE_LIMIT_BYTES

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ValueError("phase duration must be positive")
        if not self.capacity_bps > 0:
            raise ValueError("capacity_bps must be positive")
        for name in ("loss_prob", "dup_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.jitter_max_s < 0:
            raise ValueError("jitter_max_s must be non-negative")
        if self.queue_limit_bytes is not None and self.queue_limit_bytes < 0:
            raise ValueError("queue_limit_bytes must be non-negative")

    @property
    def end_s(self) -> float:
        return self.start_s + self.duration_s

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.capacity_bps):
            d["capacity_bps"] = None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Phase:
        d = dict(d)
        if d.get("capacity_bps") is None:
            d["capacity_bps"] = math.inf
        return cls(**d)


BASELINE = Phase(start_s=0.0, duration_s=math.inf, queue_limit_bytes=None)


@dataclass(frozen=True)
class LinkScenario:
    phases: tuple[Phase, ...] = ()
    base_propagation_s: float = 0.001
    uplink_delay_s: float = 0.001
    rng_seed: int = 0
    access_rate_bps: float | None = 1e9
    flush_queue_on_phase_change: bool = False
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(self.phases))
        prev_end = -math.inf
        for p in self.phases:
            if p.start_s < prev_end:
                raise ValueError(f"phase starting at {p.start_s} s overlaps or is out of order")
            prev_end = p.end_s
        if self.base_propagation_s < 0 or self.uplink_delay_s < 0:
            raise ValueError("delays must be non-negative")
        if self.access_rate_bps is not None and not (
                self.access_rate_bps > 0 and math.isfinite(self.access_rate_bps)):
            raise ValueError("access_rate_bps must be finite and positive (or null)")

    def phase_at(self, t_s: float) -> Phase:
        """Phase covering ``t_s`` (half-open ``[start, start + duration)``), else the baseline."""
        for p in self.phases:
            if p.start_s <= t_s < p.end_s:
                return p
        return BASELINE

    def boundaries_ns(self) -> list[int]:
        out = set()
        for p in self.phases:
            out.add(_ns(p.start_s))
            if math.isfinite(p.end_s):
                out.add(_ns(p.end_s))
        return sorted(out)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "phases": [p.to_dict() for p in self.phases],
            "base_propagation_s": self.base_propagation_s,
            "uplink_delay_s": self.uplink_delay_s,
            "rng_seed": self.rng_seed,
            "access_rate_bps": self.access_rate_bps,
            "flush_queue_on_phase_change": self.flush_queue_on_phase_change,
        }

    @classmethod
    def from_dict(cls, d: dict) -> LinkScenario:
        d = dict(d)
        d["phases"] = tuple(Phase.from_dict(p) for p in d.get("phases", ()))
        return cls(**d)

    @classmethod
    def load(cls, path) -> LinkScenario:
        from .traceio import SCENARIO_SCHEMA, validate_document
        doc = json.loads(Path(path).read_text())
        validate_document(doc, SCENARIO_SCHEMA, str(path))
        return cls.from_dict(doc)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def scenario_at(scenario: LinkScenario, now_s: float) -> Phase:
    return scenario.phase_at(now_s)


class _PhaseTable:
    """Vectorized phase lookup on nanosecond timestamps."""

    def __init__(self, scenario: LinkScenario):
        ph = scenario.phases
        self.start = np.array([_ns(p.start_s) for p in ph], np.int64)
        self.end = np.array([_ns(p.end_s) if math.isfinite(p.end_s) else np.iinfo(np.int64).max
                             for p in ph], np.int64)
        # the extra last entry is the baseline
        every = list(ph) + [BASELINE]
        self.capacity = np.array([p.capacity_bps for p in every], np.float64)
        self.loss = np.array([p.loss_prob for p in every], np.float64)
        self.jitter_ns = np.array([_ns(p.jitter_max_s) for p in every], np.int64)
        self.dup = np.array([p.dup_prob for p in every], np.float64)
        self.limit_bits = np.array([-1 if p.queue_limit_bytes is None else p.queue_limit_bytes * BYTE
                                    for p in every], np.int64)

    def index(self, t_ns: np.ndarray) -> np.ndarray:
        n = len(self.start)
        if n == 0:
            return np.zeros(len(t_ns), np.int64)
        i = np.searchsorted(self.start, t_ns, side="right") - 1
        inside = (i >= 0) & (t_ns < self.end[np.maximum(i, 0)])
        return np.where(inside, i, n)


@dataclass
class DropLedger:
    """Ground truth of every packet fate on the downlink, keyed by (session, seq)."""

    injected: int = 0
    delivered: int = 0
    random_loss: list = field(default_factory=list)
    queue_overflow: list = field(default_factory=list)
    duplicated: list = field(default_factory=list)
    reordered: list = field(default_factory=list)
    flushed: int = 0

    def counts(self) -> dict:
        return {
            "injected": self.injected,
            "delivered": self.delivered,
            "random_loss": len(self.random_loss),
            "queue_overflow": len(self.queue_overflow),
            "duplicated": len(self.duplicated),
            "reordered": len(self.reordered),
            "flushed": self.flushed,
        }

    def reconciles(self) -> bool:
        return self.injected == (self.delivered + len(self.random_loss)
                                 + len(self.queue_overflow) - len(self.duplicated))

    def seqs(self, kind: str, session: int | None = None) -> list[int]:
        return [s for sid, s in getattr(self, kind) if session is None or sid == session]


@dataclass
class Released:
    """Packets reaching the client; times are on the server clock."""

    session: np.ndarray
    seq: np.ndarray
    arrival_ns: np.ndarray
    duplicate: np.ndarray

    def __len__(self) -> int:
        return len(self.seq)


class Link:
    """Shared downlink with per-session sender serialization.

    Usage: :meth:`offer` bursts as they are sent, then :meth:`advance` to a
    horizon; it returns every packet whose client arrival is at or before
    the horizon. Only packets reaching the bottleneck strictly before the
    horizon are processed, so later offers can never precede them.
    """

    def __init__(self, scenario: LinkScenario, seed: int | None = None, n_sessions: int = 1):
        self.scenario = scenario
        self.rng = np.random.default_rng(scenario.rng_seed if seed is None else seed)
        self.ledger = DropLedger()
        self._phases = _PhaseTable(scenario)
        self._prop_ns = _ns(scenario.base_propagation_s)
        self._uplink_ns = _ns(scenario.uplink_delay_s)
        self._access_state = np.zeros((max(n_sessions, 1), 1), np.int64)
        self._busy = np.zeros(1, np.int64)
        self._boundaries = scenario.boundaries_ns() if scenario.flush_queue_on_phase_change else []
        self._horizon = np.iinfo(np.int64).min
        # ingress buffer: session, seq, ingress time, bits
        self._pending = [np.zeros(0, np.int64) for _ in range(4)]
        # in flight after the queue: session, seq, service start, service end, arrival, duplicate
        self._flight = [np.zeros(0, np.int64) for _ in range(5)] + [np.zeros(0, bool)]
        self._processed_ingress = np.iinfo(np.int64).min
        self.records: list[tuple] = []

    @property
    def uplink_delay_ns(self) -> int:
        return self._uplink_ns

    def uplink_transmit(self, sent_ns: int) -> int:
        """Ideal reliable, in-order uplink: arrival time of a packet sent at ``sent_ns``."""
        return sent_ns + self._uplink_ns

    def offer(self, session: int, seq, departure_ns, bits) -> np.ndarray:
        """Queue packets on the session's sender NIC; returns their bottleneck arrival times."""
        seq = np.asarray(seq, np.int64)
        departure_ns = np.asarray(departure_ns, np.int64)
        bits = np.asarray(bits, np.int64)
        n = len(seq)
        if session >= len(self._access_state):
            grown = np.zeros((session + 1, 1), np.int64)
            grown[:len(self._access_state)] = self._access_state
            self._access_state = grown
        start = np.empty(n, np.int64)
        ingress = np.empty(n, np.int64)
        admitted = np.empty(n, np.bool_)
        rate = self.scenario.access_rate_bps
        if rate is None:
            ingress[:] = departure_ns
        else:
            K.fifo_drain(departure_ns, bits, np.full(n, float(rate)), np.full(n, -1, np.int64),
                         self._access_state[session], start, ingress, admitted)
        if n and ingress[0] < self._processed_ingress:
            raise ValueError("packet offered behind already processed traffic")
        self.ledger.injected += n
        p = self._pending
        self._pending = [np.concatenate([p[0], np.full(n, session, np.int64)]),
                         np.concatenate([p[1], seq]), np.concatenate([p[2], ingress]),
                         np.concatenate([p[3], bits])]
        return ingress

    def advance(self, horizon_ns: int) -> Released:
        cuts = [b for b in self._boundaries if self._horizon < b <= horizon_ns]
        for b in cuts:
            self._process(b)
            self._flush(b)
        self._process(horizon_ns)
        self._horizon = horizon_ns
        return self._release(horizon_ns)

    def drain_all(self) -> Released:
        big = np.iinfo(np.int64).max
        for b in self._boundaries:
            if b > self._horizon:
                self._process(b)
                self._flush(b)
                self._horizon = b
        self._process(big)
        return self._release(big)

    def _process(self, before_ns: int) -> None:
        sid, seq, ingress, bits = self._pending
        take = ingress < before_ns
        if not take.any():
            return
        keep = ~take
        self._pending = [a[keep] for a in self._pending]
        sid, seq, ingress, bits = sid[take], seq[take], ingress[take], bits[take]
        order = np.lexsort((seq, sid, ingress))
        sid, seq, ingress, bits = sid[order], seq[order], ingress[order], bits[order]
        self._processed_ingress = max(self._processed_ingress, int(ingress[-1]))
        ph = self._phases
        pi = ph.index(ingress)
        n = len(seq)
        lost = self.rng.random(n) < ph.loss[pi]
        if lost.any():
            self.ledger.random_loss.extend(zip(sid[lost].tolist(), seq[lost].tolist()))
            self.records.append((sid[lost], seq[lost], np.full(lost.sum(), -1, np.int64),
                                 np.full(lost.sum(), DROP_RANDOM, np.int8), np.zeros(lost.sum(), bool)))
        ok = ~lost
        sid, seq, ingress, bits, pi = sid[ok], seq[ok], ingress[ok], bits[ok], pi[ok]
        m = len(seq)
        start = np.empty(m, np.int64)
        done = np.empty(m, np.int64)
        admitted = np.empty(m, np.bool_)
        K.fifo_drain(ingress, bits, ph.capacity[pi], ph.limit_bits[pi], self._busy, start, done, admitted)
        over = ~admitted
        if over.any():
            self.ledger.queue_overflow.extend(zip(sid[over].tolist(), seq[over].tolist()))
            self.records.append((sid[over], seq[over], np.full(over.sum(), -1, np.int64),
                                 np.full(over.sum(), DROP_OVERFLOW, np.int8), np.zeros(over.sum(), bool)))
        sid, seq, start, done, pi = sid[admitted], seq[admitted], start[admitted], done[admitted], pi[admitted]
        m = len(seq)
        jit = ph.jitter_ns[pi]
        arrival = done + self._prop_ns + np.floor(self.rng.random(m) * jit).astype(np.int64)
        dup = self.rng.random(m) < ph.dup[pi]
        nd = int(dup.sum())
        if nd:
            d_arrival = done[dup] + self._prop_ns + np.floor(self.rng.random(nd) * jit[dup]).astype(np.int64)
            sid = np.concatenate([sid, sid[dup]])
            seq = np.concatenate([seq, seq[dup]])
            start = np.concatenate([start, start[dup]])
            done = np.concatenate([done, done[dup]])
            arrival = np.concatenate([arrival, d_arrival])
            is_dup = np.concatenate([np.zeros(m, bool), np.ones(nd, bool)])
        else:
            is_dup = np.zeros(m, bool)
        f = self._flight
        self._flight = [np.concatenate([f[0], sid]), np.concatenate([f[1], seq]),
                        np.concatenate([f[2], start]), np.concatenate([f[3], done]),
                        np.concatenate([f[4], arrival]), np.concatenate([f[5], is_dup])]

    def _flush(self, boundary_ns: int) -> None:
        """Drop packets still waiting in the bottleneck queue at a phase change."""
        sid, seq, start, done, arrival, dup = self._flight
        gone = start >= boundary_ns
        if not gone.any():
            return
        keep = ~gone
        victims = gone & ~dup
        nv = int(victims.sum())
        self.ledger.queue_overflow.extend(zip(sid[victims].tolist(), seq[victims].tolist()))
        self.ledger.flushed += nv
        self.records.append((sid[victims], seq[victims], np.full(nv, -1, np.int64),
                             np.full(nv, DROP_OVERFLOW, np.int8), np.zeros(nv, bool)))
        self._flight = [a[keep] for a in self._flight]
        # only the packet in service (if any) still occupies the server
        busy = boundary_ns
        served = done[keep & ~dup]
        if len(served):
            busy = max(busy, int(served.max()))
        self._busy[0] = busy

    def _release(self, horizon_ns: int) -> Released:
        sid, seq, start, done, arrival, dup = self._flight
        out = arrival <= horizon_ns
        keep = ~out
        self._flight = [a[keep] for a in self._flight]
        r = Released(sid[out], seq[out], arrival[out], dup[out])
        if len(r):
            self.records.append((r.session, r.seq, r.arrival_ns, np.zeros(len(r), np.int8), r.duplicate))
            n_dup = int(r.duplicate.sum())
            self.ledger.delivered += len(r)
            if n_dup:
                self.ledger.duplicated.extend(zip(r.session[r.duplicate].tolist(), r.seq[r.duplicate].tolist()))
        return r

    def fates(self) -> tuple[np.ndarray, ...]:
        """All recorded fates: session, seq, arrival (-1 if dropped), drop reason, duplicate flag."""
        if not self.records:
            z = np.zeros(0, np.int64)
            return z, z, z, np.zeros(0, np.int8), np.zeros(0, bool)
        return tuple(np.concatenate([r[k] for r in self.records]) for k in range(5))

    def finalize_ledger(self) -> DropLedger:
        """Fill the reordering record: originals arriving before a lower-seq packet of the same session."""
        sid, seq, arrival, reason, dup = self.fates()
        ok = (arrival >= 0) & ~dup
        sid, seq, arrival = sid[ok], seq[ok], arrival[ok]
        order = np.lexsort((seq, sid))
        sid, seq, arrival = sid[order], seq[order], arrival[order]
        reordered = []
        for s in np.unique(sid):
            mask = sid == s
            a = arrival[mask]
            if len(a) < 2:
                continue
            late = a[1:] < np.maximum.accumulate(a)[:-1]
            reordered.extend((int(s), int(q)) for q in seq[mask][1:][late])
        self.ledger.reordered = reordered
        return self.ledger


def link_transmit(link: Link, bits: int, now_ns: int, seq: int = 0, session: int = 0) -> int | None:
    """Push one packet through an otherwise idle pipeline; returns its arrival time or ``None`` if dropped.

    Duplicates created for the packet are released with it and recorded in
    the ledger; the returned time is the original's.
    """
    link.offer(session, [seq], [now_ns], [bits])
    r = link.drain_all()
    originals = r.arrival_ns[~r.duplicate]
    return int(originals[0]) if len(originals) else None
