"""Virtual-time simulation of one or more streaming sessions over a shared downlink.

Time advances from one controller period boundary to the next. Between
two boundaries nothing can change a controller's output, so all frames
sent in the period are generated at once, pushed through the link, and
every client arrival up to the boundary is assembled in order. Stats
feedback that reaches the server by the boundary is fed to the controller
before it steps. At equal timestamps the order is arrival, feedback,
controller step, frame send; ties between packets are broken by session
then sequence number.
"""

from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .abr import Controller, Decision
from .metrics import DEFAULT_DEADLINE_S, DEFAULT_JITTER_WINDOW, MetricsEngine
from .model import NS_PER_S, STATS_FEEDBACK_BITS, StatsFeedback
from .netem import DROP_NONE, DropLedger, Link, LinkScenario
from .traffic import (
    AUDIO_PERIOD_S,
    TRACKING_PACKET_BITS,
    TRACKING_PACKETS_PER_FRAME,
    TrafficConfig,
    burst_arrays,
    frame_payload_bits,
)


@dataclass
class Session:
    controller: Controller
    traffic: TrafficConfig = field(default_factory=TrafficConfig)
    client_offset_ns: int = 0
    start_s: float = 0.0
    name: str = ""


class _Grow:
    """Append-only int64 columns indexed by position."""

    def __init__(self, names, capacity=4096):
        self.names = names
        self.n = 0
        self.cols = {k: np.zeros(capacity, np.int64) for k in names}

    def extend(self, **values):
        m = len(next(iter(values.values())))
        need = self.n + m
        cap = len(self.cols[self.names[0]])
        if need > cap:
            cap = max(2 * cap, need)
            for k in self.names:
                col = np.zeros(cap, np.int64)
                col[:self.n] = self.cols[k][:self.n]
                self.cols[k] = col
        for k, v in values.items():
            self.cols[k][self.n:need] = v
        self.n = need

    def get(self, name):
        return self.cols[name][:self.n]


@dataclass
class PacketLog:
    """Every video packet a session sent; row ``seq - 1`` holds packet ``seq``."""

    frame_index: np.ndarray
    index_in_frame: np.ndarray
    n_packets_in_frame: np.ndarray
    total_bits: np.ndarray
    departure_ns: np.ndarray

    def __len__(self) -> int:
        return len(self.frame_index)

    @property
    def seq(self) -> np.ndarray:
        return np.arange(1, len(self) + 1, dtype=np.int64)


@dataclass
class SessionResult:
    name: str
    session_id: int
    seed: int
    duration_s: float
    fps: float
    client_offset_ns: int
    uplink_delay_ns: int
    engine: MetricsEngine
    decisions: list[Decision]
    ledger: DropLedger
    packets: PacketLog
    fates: dict
    frame_bitrate: np.ndarray
    uplink_bits: int = 0
    config: dict = field(default_factory=dict)

    @property
    def frames(self):
        return self.engine.table()

    def completion_server_ns(self) -> np.ndarray:
        return self.frames.completion_client_ns - self.client_offset_ns

    def feedback_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Frame indices and server-clock feedback arrival times."""
        fb = self.engine.feedback
        frames = np.array(sorted(fb), np.int64)
        return frames, np.array([fb[f] for f in frames.tolist()], np.int64)

    def summary(self, intervals=None) -> list[dict]:
        return summarize_result(self, intervals)


def summary_series(frame_index, completion_client_ns, first_departure_ns, prev_index, lost,
                   feedback_server_ns, decision_time_s, bitrate_bps, client_offset_ns: int = 0) -> dict:
    """Time-stamped series the interval summary is built from.

    Frame columns are in completion order; ``feedback_server_ns`` is -1 for
    frames whose stats feedback never arrived.
    """
    frame_index = np.asarray(frame_index, np.int64)
    comp = np.asarray(completion_client_ns, np.int64)
    dep = np.asarray(first_departure_ns, np.int64)
    fb = np.asarray(feedback_server_ns, np.int64)
    has = np.asarray(prev_index, np.int64) >= 0
    with_fb = fb >= 0
    return {
        "completion_s": (comp - client_offset_ns) / NS_PER_S,
        "vf_rtt_time_s": fb[with_fb] / NS_PER_S,
        "vf_rtt_s": (fb[with_fb] - dep[with_fb]) / NS_PER_S,
        "loss_time_s": (comp[has] - client_offset_ns) / NS_PER_S,
        "loss": np.asarray(lost, np.int64)[has],
        "decision_time_s": np.asarray(decision_time_s, np.float64),
        "bitrate_bps": np.asarray(bitrate_bps, np.float64),
    }


def _series_from_result(res: SessionResult) -> dict:
    t = res.frames
    fb = res.engine.feedback
    fb_ns = np.array([fb.get(f, -1) for f in t.frame_index.tolist()], np.int64)
    return summary_series(t.frame_index, t.completion_client_ns, t.first_departure_ns, t.prev_index, t.lost,
                          fb_ns, [d.time_s for d in res.decisions], [d.bitrate for d in res.decisions],
                          res.client_offset_ns)


def _mean_std(x: np.ndarray) -> tuple[float | None, float | None]:
    if len(x) == 0:
        return None, None
    return float(np.mean(x)), float(np.std(x))


def interval_summary(series: dict, start_s: float, end_s: float) -> dict:
    """One row of the per-interval table; stds are population stds.

    FDR is the count of completely and timely received frames per 1 s bin,
    binned by completion time (server clock).
    """
    def inside(t):
        return (t >= start_s) & (t < end_s)

    n_bins = max(1, math.ceil(end_s - start_s))
    comp = series["completion_s"]
    comp = comp[inside(comp)]
    bins = np.minimum(np.floor(comp - start_s).astype(np.int64), n_bins - 1)
    fdr = np.bincount(bins, minlength=n_bins)[:n_bins].astype(float)
    vf = series["vf_rtt_s"][inside(series["vf_rtt_time_s"])]
    br = series["bitrate_bps"][inside(series["decision_time_s"])]
    vf_mean, vf_std = _mean_std(vf)
    fdr_mean, fdr_std = _mean_std(fdr)
    br_mean, br_std = _mean_std(br)
    return {
        "start_s": start_s,
        "end_s": end_s,
        "vf_rtt_mean_s": vf_mean,
        "vf_rtt_std_s": vf_std,
        "fdr_mean_fps": fdr_mean,
        "fdr_std_fps": fdr_std,
        "packets_lost": int(series["loss"][inside(series["loss_time_s"])].sum()),
        "bitrate_mean_bps": br_mean,
        "bitrate_std_bps": br_std,
    }


def summarize_result(res: SessionResult, intervals=None) -> list[dict]:
    if intervals is None:
        intervals = [(0.0, res.duration_s)]
    series = _series_from_result(res)
    return [interval_summary(series, a, b) for a, b in intervals]


class _SessionState:
    def __init__(self, sid: int, session: Session, rng: np.random.Generator, link: Link,
                 deadline_s: float, jitter_window: int, audio_sid: int | None):
        self.sid = sid
        self.session = session
        self.ctrl = session.controller
        self.traffic = session.traffic
        self.rng = rng
        self.link = link
        self.offset = session.client_offset_ns
        self.engine = MetricsEngine(deadline_s=deadline_s, jitter_window=jitter_window,
                                    overhead_bits=self.traffic.overhead_bits)
        self.start_ns = round(session.start_s * NS_PER_S)
        self.period_ns = round(self.ctrl.period_s * NS_PER_S)
        if self.period_ns <= 0:
            raise ValueError("controller period must be positive")
        self.next_step = self.start_ns + self.period_ns
        self.next_k = 0
        self.next_seq = 1
        self.last_dep: int | None = None
        self.meta = _Grow(("frame", "idx", "npk", "bits", "dep"))
        self.frame_bitrate: list[np.ndarray] = []
        self.pending = [np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, bool)]
        self.fb_queue: deque = deque()
        self.uplink_bits = 0
        self.audio_sid = audio_sid
        self.audio_next = 0
        self.audio_seq = 1

    def send_until(self, limit_ns: int) -> None:
        traffic = self.traffic
        first = int(traffic.frame_departure_ns(self.next_k, self.start_ns))
        if first < limit_ns:
            n_guess = int((limit_ns - first) * traffic.fps / NS_PER_S) + 2
            ks = np.arange(self.next_k, self.next_k + n_guess, dtype=np.int64)
            deps = traffic.frame_departure_ns(ks, self.start_ns)
            ks, deps = ks[deps < limit_ns], deps[deps < limit_ns]
            self._send_frames(ks + 1, deps)
            self.next_k = int(ks[-1]) + 1
        if self.audio_sid is not None:
            self._send_audio(limit_ns)

    def _send_frames(self, frames: np.ndarray, deps: np.ndarray) -> None:
        traffic = self.traffic
        bitrate = self.ctrl.bitrate
        payload = frame_payload_bits(traffic, bitrate, frames, self.rng)
        pos, idx, npk, pay = burst_arrays(payload, traffic.max_packet_payload_bits)
        bits = pay + traffic.overhead_bits
        seq = self.next_seq + np.arange(len(pos), dtype=np.int64)
        self.next_seq += len(pos)
        dep = deps[pos]
        self.meta.extend(frame=frames[pos], idx=idx, npk=npk, bits=bits, dep=dep)
        self.frame_bitrate.append(np.full(len(frames), float(bitrate)))
        self.link.offer(self.sid, seq, dep, bits)
        if traffic.include_tracking_uplink:
            self.uplink_bits += TRACKING_PACKETS_PER_FRAME * TRACKING_PACKET_BITS * len(frames)
        for d in deps.tolist():
            if self.last_dep is not None:
                self.ctrl.observe_departure(d / NS_PER_S, (d - self.last_dep) / NS_PER_S)
            self.last_dep = d

    def _send_audio(self, limit_ns: int) -> None:
        period = round(AUDIO_PERIOD_S * NS_PER_S)
        times = []
        while self.start_ns + self.audio_next * period < limit_ns:
            times.append(self.start_ns + self.audio_next * period)
            self.audio_next += 1
        if not times:
            return
        bits = round(self.traffic.audio_bitrate_bps * AUDIO_PERIOD_S) + self.traffic.overhead_bits
        seq = self.audio_seq + np.arange(len(times), dtype=np.int64)
        self.audio_seq += len(times)
        self.link.offer(self.audio_sid, seq, np.array(times, np.int64), np.full(len(times), bits, np.int64))

    def receive(self, seq, arrival, dup) -> None:
        p = self.pending
        self.pending = [np.concatenate([p[0], seq]), np.concatenate([p[1], arrival]),
                        np.concatenate([p[2], dup])]

    def consume(self, horizon_ns: int | None, feed_controller: bool = True) -> None:
        seq, arr, dup = self.pending
        take = np.ones(len(seq), bool) if horizon_ns is None else arr <= horizon_ns
        if take.any():
            self.pending = [a[~take] for a in self.pending]
            seq, arr, dup = seq[take], arr[take], dup[take]
            order = np.lexsort((dup, seq, arr))
            seq, arr = seq[order], arr[order]
            row = seq - 1
            m = self.meta
            table = self.engine.on_batch(seq, m.get("frame")[row], m.get("npk")[row], m.get("bits")[row],
                                         m.get("dep")[row], arr + self.offset)
            if len(table):
                comp = (table.completion_client_ns - self.offset).tolist()
                ia = np.where(table.has_prev, table.interarrival_ns, -1).tolist()
                peak = table.peak_bps.tolist()
                for i, f in enumerate(table.frame_index.tolist()):
                    fb = self.link.uplink_transmit(comp[i])
                    payload = int(table.total_bits[i]) - int(table.n_packets[i]) * self.traffic.overhead_bits
                    self.fb_queue.append((fb, f, comp[i], int(table.first_departure_ns[i]), ia[i], peak[i], payload))
        self._apply_feedback(horizon_ns, feed_controller)

    def _apply_feedback(self, horizon_ns: int | None, feed_controller: bool) -> None:
        q = self.fb_queue
        uplink = self.link.uplink_delay_ns
        while q and (horizon_ns is None or q[0][0] <= horizon_ns):
            fb, f, comp, dep, ia, peak, payload = q.popleft()
            self.engine.on_feedback(StatsFeedback(f, comp + self.offset, fb))
            self.uplink_bits += STATS_FEEDBACK_BITS
            if feed_controller:
                self.ctrl.observe_frame(
                    fb / NS_PER_S,
                    interarrival_s=ia / NS_PER_S if ia >= 0 else None,
                    peak_bps=None if math.isnan(peak) else peak,
                    vf_rtt_s=(fb - dep) / NS_PER_S,
                    payload_bits=payload,
                    network_delay_s=(uplink + comp - dep) / NS_PER_S,
                )


def _check(sessions, duration_s):
    if not sessions:
        raise ValueError("at least one session is required")
    if not duration_s > 0:
        raise ValueError("duration must be positive")
    for s in sessions:
        if s.start_s < 0:
            raise ValueError("session start must be non-negative")
        if not s.controller.bitrate > 0:
            raise ValueError("initial bitrate must be positive")


def run_multi_session(sessions: list[Session], scenario: LinkScenario, duration_s: float, seed: int = 0, *,
                      deadline_s: float = DEFAULT_DEADLINE_S,
                      jitter_window: int = DEFAULT_JITTER_WINDOW) -> list[SessionResult]:
    """Run sessions sharing one bottleneck; each keeps its own controller and metrics."""
    _check(sessions, duration_s)
    n = len(sessions)
    seeds = np.random.SeedSequence([seed, scenario.rng_seed]).spawn(n + 1)
    audio_ids = {}
    for i, s in enumerate(sessions):
        if s.traffic.audio_bitrate_bps > 0:
            audio_ids[i] = n + len(audio_ids)
    link = Link(scenario, seed=seeds[0], n_sessions=n + len(audio_ids))
    states = [_SessionState(i, s, np.random.default_rng(seeds[i + 1]), link, deadline_s, jitter_window,
                            audio_ids.get(i)) for i, s in enumerate(sessions)]
    duration_ns = round(duration_s * NS_PER_S)

    steps = [(st.next_step, st.sid) for st in states]
    heapq.heapify(steps)
    while True:
        horizon = min(steps[0][0], duration_ns)
        for st in states:
            st.send_until(horizon)
        _dispatch(link.advance(horizon), states)
        for st in states:
            st.consume(horizon)
        if horizon >= duration_ns:
            break
        while steps and steps[0][0] == horizon:
            _, sid = heapq.heappop(steps)
            st = states[sid]
            st.ctrl.step(horizon / NS_PER_S)
            st.next_step += st.period_ns
            heapq.heappush(steps, (st.next_step, sid))

    # let packets already in the network land; nothing is sent or decided any more
    _dispatch(link.drain_all(), states)
    for st in states:
        st.consume(None, feed_controller=False)
        st.engine.finalize()
    ledger = link.finalize_ledger()
    sid_all, seq_all, arr_all, reason_all, dup_all = link.fates()
    results = []
    for st in states:
        mine = sid_all == st.sid
        m = st.meta
        results.append(SessionResult(
            name=st.session.name or f"session{st.sid}",
            session_id=st.sid,
            seed=seed,
            duration_s=duration_s,
            fps=st.traffic.fps,
            client_offset_ns=st.offset,
            uplink_delay_ns=link.uplink_delay_ns,
            engine=st.engine,
            decisions=list(st.ctrl.decisions),
            ledger=_session_ledger(ledger, st.sid, m.n, int(np.count_nonzero(arr_all[mine] >= 0))),
            packets=PacketLog(m.get("frame").copy(), m.get("idx").copy(), m.get("npk").copy(),
                              m.get("bits").copy(), m.get("dep").copy()),
            fates={"seq": seq_all[mine], "arrival_ns": arr_all[mine], "reason": reason_all[mine],
                   "duplicate": dup_all[mine]},
            frame_bitrate=np.concatenate(st.frame_bitrate) if st.frame_bitrate else np.zeros(0),
            uplink_bits=st.uplink_bits,
        ))
    return results


def _dispatch(released, states) -> None:
    if not len(released):
        return
    for st in states:
        mine = released.session == st.sid
        if mine.any():
            st.receive(released.seq[mine], released.arrival_ns[mine], released.duplicate[mine])


def _session_ledger(ledger: DropLedger, sid: int, injected: int, delivered: int) -> DropLedger:
    def pick(items):
        return [(s, q) for s, q in items if s == sid]
    return DropLedger(injected=injected, delivered=delivered, random_loss=pick(ledger.random_loss),
                      queue_overflow=pick(ledger.queue_overflow), duplicated=pick(ledger.duplicated),
                      reordered=pick(ledger.reordered), flushed=ledger.flushed)


def run_session(traffic: TrafficConfig, scenario: LinkScenario, controller: Controller, duration_s: float,
                seed: int = 0, *, client_offset_ns: int = 0, deadline_s: float = DEFAULT_DEADLINE_S,
                jitter_window: int = DEFAULT_JITTER_WINDOW, name: str = "") -> SessionResult:
    session = Session(controller, traffic, client_offset_ns, 0.0, name)
    return run_multi_session([session], scenario, duration_s, seed,
                             deadline_s=deadline_s, jitter_window=jitter_window)[0]


def delivered_mask(res: SessionResult) -> np.ndarray:
    f = res.fates
    return (f["arrival_ns"] >= 0) & (f["reason"] == DROP_NONE)
