"""Independent recomputation of the per-frame metrics from a raw packet trace.

Nothing here is shared with :mod:`nestsim.metrics`. Frame accounting is
done with whole-array operations over the deduplicated arrival stream
instead of a per-packet state machine:

* a frame is *accepted* when all its packets arrived, its last packet came
  within the deadline of its first, and its index exceeds that of every
  earlier such frame (earlier in completion order);
* every other frame with at least one received packet is abandoned.

Only the two recursive filters (RFC 3550 jitter and the Kalman gradient
filter) and the sliding-window deviation are explicit loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._kernels import njit
from .traceio import (
    FLOAT_COLUMNS,
    FeedbackLog,
    MetricLog,
    RunMismatchError,
    Trace,
    empty_columns,
    read_feedback,
    read_metrics,
    read_trace,
)

TOLERANCE = 1e-9
NS = 1e9

# Kalman filter for the OWD gradient: state noise, measurement-noise EMA
# weight and floor, initial error and measurement-noise variances
FILTER_Q = 1e-7
FILTER_ALPHA = 0.05
FILTER_R_FLOOR = 1e-9
FILTER_P0 = 0.1
FILTER_R0 = 5e-5

COMPARED = FLOAT_COLUMNS + ("packet_loss_count", "loss_clamped", "total_bits", "n_packets",
                            "completion_client_ns", "first_departure_ns", "feedback_server_ns")


@njit(cache=True)
def _rfc3550(arrival, departure):
    out = np.empty(arrival.shape[0])
    j = 0.0
    for k in range(arrival.shape[0]):
        if k > 0:
            d = (arrival[k] - arrival[k - 1]) - (departure[k] - departure[k - 1])
            j = j + (abs(d) - j) / 16.0
        out[k] = j
    return out


@njit(cache=True)
def _kalman(raw, q, alpha, r_floor, p0, r0):
    out = np.empty(raw.shape[0])
    x = 0.0
    p = p0
    r = r0
    for i in range(raw.shape[0]):
        y = raw[i] - x
        r = (1.0 - alpha) * r + alpha * y * y
        if r < r_floor:
            r = r_floor
        prior = p + q
        gain = prior / (prior + r)
        x = x + gain * y
        p = (1.0 - gain) * prior
        out[i] = x
    return out


@njit(cache=True)
def _window_std_s(gaps, w):
    """Sample std (s) of each trailing window of up to ``w`` integer-ns gaps; NaN below 2 samples."""
    out = np.full(gaps.shape[0], np.nan)
    for j in range(gaps.shape[0]):
        lo = j - w + 1
        if lo < 0:
            lo = 0
        c = j - lo + 1
        if c < 2:
            continue
        total = 0
        for k in range(lo, j + 1):
            total += gaps[k]
        acc = 0.0
        for k in range(lo, j + 1):
            dev = float(c * gaps[k] - total)
            acc += dev * dev
        out[j] = math.sqrt(acc / (c * c * (c - 1))) / 1e9
    return out


def recompute(trace: Trace, feedback: FeedbackLog | dict | None, deadline_ns: int, jitter_window: int,
              run_id: str | None = None) -> MetricLog:
    """Metric log recomputed from a packet trace (and stats-feedback times, if any)."""
    run_id = trace.run_id if run_id is None else run_id
    header = {"run_id": run_id, "deadline_ns": deadline_ns, "jitter_window": jitter_window}
    got = trace.drop_reason == 0
    if not got.any():
        return MetricLog(header, empty_columns(0))
    seq = trace.seq[got]
    arr = trace.arrival_client_ns[got]
    dup = trace.duplicate[got]
    order = np.lexsort((dup, seq, arr))
    _, first_copy = np.unique(seq[order], return_index=True)
    take = got.nonzero()[0][order[np.sort(first_copy)]]

    s_seq = trace.seq[take]
    s_frame = trace.frame_index[take]
    s_npk = trace.n_packets_in_frame[take]
    s_bits = trace.total_bits[take]
    s_dep = trace.departure_ns[take]
    s_arr = trace.arrival_client_ns[take]
    n = len(take)
    pos = np.arange(n)

    # group the stream by frame
    by_frame = np.lexsort((pos, s_frame))
    fr = s_frame[by_frame]
    starts = np.flatnonzero(np.r_[True, fr[1:] != fr[:-1]])
    ends = np.r_[starts[1:], n] - 1
    frames = fr[starts]
    first_pos = by_frame[starts]
    last_pos = by_frame[ends]
    count = ends - starts + 1
    frame_bits = np.add.reduceat(s_bits[by_frame], starts)
    frame_dep = np.minimum.reduceat(s_dep[by_frame], starts)
    complete = count == s_npk[first_pos]
    timely = s_arr[last_pos] - s_arr[first_pos] <= deadline_ns

    cand = np.flatnonzero(complete & timely)
    cand = cand[np.argsort(last_pos[cand], kind="stable")]
    cf = frames[cand]
    best_before = np.maximum.accumulate(np.r_[-1, cf[:-1]]) if len(cf) else cf
    acc = cand[cf > best_before]
    accepted = frames[acc]
    abandoned = np.setdiff1d(frames, accepted)

    m = len(acc)
    cols = empty_columns(m)
    if m == 0:
        return MetricLog(header, cols, abandoned)
    p = last_pos[acc]
    comp = s_arr[p]
    first = s_arr[first_pos[acc]]
    dep = frame_dep[acc]
    bits = frame_bits[acc]
    span = comp - first

    hseq = np.maximum.accumulate(s_seq)[p]
    cum_bits = np.cumsum(s_bits)[p]
    pkts_between = np.diff(np.r_[-1, p])
    bits_between = np.diff(np.r_[0, cum_bits])
    pj = _rfc3550(s_arr, s_dep)[p]

    cols["frame_index"][:] = accepted
    cols["completion_client_ns"][:] = comp
    cols["first_departure_ns"][:] = dep
    cols["total_bits"][:] = bits
    cols["n_packets"][:] = count[acc]
    cols["frame_span_s"][:] = span / NS
    with np.errstate(divide="ignore", invalid="ignore"):
        cols["peak_throughput_bps"][:] = np.where(span > 0, bits * NS / np.maximum(span, 1), np.nan)

    if m > 1:
        gap = np.diff(comp)
        expected = np.diff(hseq)
        shortfall = expected - pkts_between[1:]
        lost = np.maximum(shortfall, 0)
        owd = gap - np.diff(dep)
        rest = slice(1, None)
        cols["prev_index"][rest] = accepted[:-1]
        cols["frame_interarrival_s"][rest] = gap / NS
        cols["packet_loss_count"][rest] = lost
        cols["loss_clamped"][rest] = shortfall < 0
        with np.errstate(divide="ignore", invalid="ignore"):
            cols["packet_loss_ratio"][rest] = np.where(expected > 0, lost / np.maximum(expected, 1), 0.0)
            cols["throughput_bps"][rest] = np.where(gap > 0, bits_between[1:] * NS / np.maximum(gap, 1), np.nan)
        cols["frame_jitter_s"][rest] = _window_std_s(gap, jitter_window)
        cols["packet_jitter_s"][rest] = pj[1:] / NS
        cols["owd_gradient_s"][rest] = owd / NS
        cols["fowd_s"][rest] = _kalman(owd / NS, FILTER_Q, FILTER_ALPHA, FILTER_R_FLOOR, FILTER_P0, FILTER_R0)

    if feedback is not None:
        fb = feedback.as_dict() if isinstance(feedback, FeedbackLog) else feedback
        fb_ns = np.array([fb.get(f, -1) for f in accepted.tolist()], np.int64)
        cols["feedback_server_ns"][:] = fb_ns
        cols["vf_rtt_s"][:] = np.where(fb_ns >= 0, (fb_ns - dep) / NS, np.nan)
        header["unpaired_feedback"] = sorted(set(fb) - set(accepted.tolist()))
    return MetricLog(header, cols, abandoned)


def _deviation(a: np.ndarray, b: np.ndarray) -> float:
    """Largest relative deviation; undefined values must agree exactly."""
    if len(a) == 0:
        return 0.0
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    na, nb = np.isnan(a), np.isnan(b)
    if np.any(na != nb):
        return math.inf
    ok = ~na
    a, b = a[ok], b[ok]
    diff = np.abs(a - b)
    scale = np.maximum(np.abs(a), np.abs(b))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(diff == 0, 0.0, diff / scale)
    return float(rel.max()) if len(rel) else 0.0


@dataclass
class OracleReport:
    run_id: str
    tolerance: float = TOLERANCE
    frames_logged: int = 0
    frames_recomputed: int = 0
    deviations: dict = field(default_factory=dict)
    missing_frames: list = field(default_factory=list)
    extra_frames: list = field(default_factory=list)
    prev_mismatch: list = field(default_factory=list)
    abandoned_missing: list = field(default_factory=list)
    abandoned_extra: list = field(default_factory=list)
    unpaired_feedback: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def failing(self) -> list[str]:
        return [k for k, v in self.deviations.items() if not v <= self.tolerance]

    @property
    def accounting_ok(self) -> bool:
        return not (self.missing_frames or self.extra_frames or self.prev_mismatch
                    or self.abandoned_missing or self.abandoned_extra or self.unpaired_feedback)

    @property
    def passed(self) -> bool:
        return self.accounting_ok and not self.failing

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "passed": self.passed,
            "tolerance": self.tolerance,
            "frames_logged": self.frames_logged,
            "frames_recomputed": self.frames_recomputed,
            "max_relative_deviation": self.deviations,
            "failing_metrics": self.failing,
            "missing_frames": self.missing_frames,
            "extra_frames": self.extra_frames,
            "prev_mismatch": self.prev_mismatch,
            "abandoned_missing": self.abandoned_missing,
            "abandoned_extra": self.abandoned_extra,
            "unpaired_feedback": self.unpaired_feedback,
            "skipped": self.skipped,
        }

    def format(self) -> str:
        lines = [f"run {self.run_id}: {'PASS' if self.passed else 'FAIL'} "
                 f"({self.frames_logged} logged frames, {self.frames_recomputed} recomputed)"]
        for name, dev in self.deviations.items():
            mark = "ok" if dev <= self.tolerance else "MISMATCH"
            lines.append(f"  {name:24s} max rel dev {dev:.3g}  {mark}")
        for label in ("missing_frames", "extra_frames", "prev_mismatch", "abandoned_missing",
                      "abandoned_extra", "unpaired_feedback"):
            values = getattr(self, label)
            if values:
                shown = ", ".join(str(v) for v in values[:10]) + (" ..." if len(values) > 10 else "")
                lines.append(f"  {label}: {shown}")
        if self.skipped:
            lines.append(f"  not checked: {', '.join(self.skipped)}")
        return "\n".join(lines)


def compare(log: MetricLog, ref: MetricLog, tolerance: float = TOLERANCE,
            skip: tuple[str, ...] = ()) -> OracleReport:
    """Check a metric log against the oracle's recomputation."""
    report = OracleReport(log.run_id, tolerance, len(log), len(ref), skipped=list(skip))
    fa, fb = log["frame_index"], ref["frame_index"]
    common, ia, ib = np.intersect1d(fa, fb, assume_unique=True, return_indices=True)
    report.missing_frames = np.setdiff1d(fb, fa).tolist()
    report.extra_frames = np.setdiff1d(fa, fb).tolist()
    prev_bad = log["prev_index"][ia] != ref["prev_index"][ib]
    report.prev_mismatch = common[prev_bad].tolist()
    for name in COMPARED:
        if name in skip:
            continue
        report.deviations[name] = _deviation(log[name][ia], ref[name][ib])
    report.abandoned_missing = np.setdiff1d(ref.abandoned, log.abandoned).tolist()
    report.abandoned_extra = np.setdiff1d(log.abandoned, ref.abandoned).tolist()
    report.unpaired_feedback = list(ref.header.get("unpaired_feedback", []))
    return report


def check(trace: Trace, log: MetricLog, feedback: FeedbackLog | dict | None = None,
          tolerance: float = TOLERANCE) -> OracleReport:
    """Recompute from ``trace`` (+ ``feedback``) and compare with ``log``."""
    ids = {trace.run_id, log.run_id}
    if isinstance(feedback, FeedbackLog):
        ids.add(feedback.run_id)
    if len(ids) != 1:
        raise RunMismatchError(f"artifacts come from different runs: {sorted(ids)}")
    ref = recompute(trace, feedback, int(log.header["deadline_ns"]), int(log.header["jitter_window"]))
    skip = () if feedback is not None else ("vf_rtt_s", "feedback_server_ns")
    return compare(log, ref, tolerance, skip)


def validate_files(trace_path, metrics_path, feedback_path=None, tolerance: float = TOLERANCE) -> OracleReport:
    """File form of :func:`check`; looks for ``feedback.csv`` next to the trace if none is given."""
    trace = read_trace(trace_path)
    log = read_metrics(metrics_path)
    if feedback_path is None:
        sibling = Path(trace_path).with_name("feedback.csv")
        feedback_path = sibling if sibling.exists() else None
    feedback = read_feedback(feedback_path) if feedback_path is not None else None
    return check(trace, log, feedback, tolerance)
