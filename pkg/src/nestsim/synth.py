"""Randomized synthetic streams for checking the metrics engine against the oracle.

Each run draws impairment parameters spanning the emulated ranges used in
the capacity, loss, duplication and jitter tests (loss and duplication up
to 2 %, jitter up to 20 ms, bottlenecks near the stream bitrate), pushes a
burst-per-frame stream through :class:`~nestsim.netem.Link` and returns
the packet trace, the stats feedback and the engine's metric log.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .model import NS_PER_S, StatsFeedback
from .netem import Link, LinkScenario, Phase
from .traceio import FeedbackLog, MetricLog, Trace, make_trace, metric_log_from_engine, replay_trace
from .traffic import TrafficConfig, burst_arrays, frame_payload_bits


@dataclass(frozen=True)
class SynthParams:
    n_frames: int
    fps: float
    bitrate_bps: float
    sigma_rel: float
    capacity_bps: float
    queue_limit_bytes: int | None
    loss_prob: float
    dup_prob: float
    jitter_max_s: float
    access_rate_bps: float | None
    propagation_s: float
    uplink_delay_s: float
    client_offset_ns: int
    deadline_s: float
    jitter_window: int
    n_batches: int

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.capacity_bps):
            d["capacity_bps"] = None
        return d


def random_params(rng: np.random.Generator, max_frames: int = 200) -> SynthParams:
    bitrate = float(rng.uniform(2e6, 40e6))
    capacity = math.inf if rng.random() < 0.3 else bitrate * float(rng.uniform(0.7, 2.5))
    return SynthParams(
        n_frames=int(rng.integers(1, max_frames + 1)),
        fps=float(rng.choice([60.0, 72.0, 90.0, 120.0])),
        bitrate_bps=bitrate,
        sigma_rel=float(rng.choice([0.0, 0.2])),
        capacity_bps=capacity,
        queue_limit_bytes=None if rng.random() < 0.2 else int(rng.integers(20, 1000)) * 1446,
        loss_prob=0.0 if rng.random() < 0.2 else float(rng.uniform(0, 0.02)),
        dup_prob=0.0 if rng.random() < 0.2 else float(rng.uniform(0, 0.02)),
        jitter_max_s=0.0 if rng.random() < 0.2 else float(rng.uniform(0, 0.020)),
        access_rate_bps=None if rng.random() < 0.3 else 1e9,
        propagation_s=float(rng.uniform(0, 0.005)),
        uplink_delay_s=float(rng.uniform(0.0005, 0.005)),
        client_offset_ns=int(rng.integers(-5 * NS_PER_S, 5 * NS_PER_S + 1)),
        deadline_s=0.050 if rng.random() < 0.7 else float(rng.uniform(0.005, 0.1)),
        jitter_window=int(rng.choice([2, 4, 16, 32])),
        n_batches=int(rng.integers(1, 6)),
    )


@dataclass
class SynthRun:
    params: SynthParams
    trace: Trace
    feedback: FeedbackLog
    log: MetricLog


def synth_trace(params: SynthParams, rng: np.random.Generator, run_id: str = "synth") -> Trace:
    """Packet trace of ``params.n_frames`` frames over a one-phase impaired link."""
    traffic = TrafficConfig(fps=params.fps, sigma_rel=params.sigma_rel)
    frames = np.arange(1, params.n_frames + 1, dtype=np.int64)
    deps = traffic.frame_departure_ns(frames - 1)
    payload = frame_payload_bits(traffic, params.bitrate_bps, frames, rng)
    pos, idx, npk, pay = burst_arrays(payload, traffic.max_packet_payload_bits)
    bits = pay + traffic.overhead_bits
    seq = np.arange(1, len(pos) + 1, dtype=np.int64)
    dep = deps[pos]
    phase = Phase(0.0, math.inf, params.capacity_bps, params.loss_prob, params.jitter_max_s,
                  params.dup_prob, params.queue_limit_bytes)
    scenario = LinkScenario((phase,), base_propagation_s=params.propagation_s,
                            uplink_delay_s=params.uplink_delay_s, access_rate_bps=params.access_rate_bps)
    link = Link(scenario, seed=rng)
    link.offer(0, seq, dep, bits)
    link.drain_all()
    _, f_seq, f_arr, f_reason, f_dup = link.fates()
    row = f_seq - 1
    arrival = np.where(f_reason == 0, f_arr + params.client_offset_ns, -1)
    return make_trace(run_id, f_seq, frames[pos][row], idx[row], npk[row], bits[row], dep[row],
                      arrival, f_reason, f_dup)


def synthetic_run(seed: int, max_frames: int = 200) -> SynthRun:
    """One randomized run: trace, feedback and the metrics engine's log."""
    rng = np.random.default_rng(seed)
    params = random_params(rng, max_frames)
    run_id = f"synth-{seed}"
    trace = synth_trace(params, rng, run_id)
    n_rx = int(np.count_nonzero(trace.delivered))
    cuts = np.sort(rng.integers(0, max(n_rx, 1), size=params.n_batches - 1)).tolist()
    engine = replay_trace(trace, deadline_s=params.deadline_s, jitter_window=params.jitter_window, cuts=cuts)
    t = engine.table()
    # the client reports each accepted frame; reports cross an ideal uplink
    uplink = round(params.uplink_delay_s * NS_PER_S)
    fb_frames = t.frame_index[rng.random(len(t)) < 0.95]
    fb_times = t.completion_client_ns[np.isin(t.frame_index, fb_frames)] - params.client_offset_ns + uplink
    feedback = FeedbackLog(run_id, fb_frames.copy(), fb_times)
    for f, when in zip(fb_frames.tolist(), fb_times.tolist()):
        engine.on_feedback(StatsFeedback(f, when - uplink + params.client_offset_ns, when))
    return SynthRun(params, trace, feedback, metric_log_from_engine(engine, run_id, params.client_offset_ns))
