"""Trace, metric-log and decision-log files, plus manifest/scenario schemas.

Packet traces are CSV with a versioned comment header; metric and decision
logs are line-delimited JSON whose first line is a header record. All
times are integer nanoseconds so files round-trip losslessly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .model import NS_PER_S

TRACE_VERSION = 1
TRACE_MAGIC = "nestsim-trace"
FEEDBACK_MAGIC = "nestsim-feedback"
METRICS_FORMAT = "nestsim-metrics"
DECISIONS_FORMAT = "nestsim-decisions"

TRACE_COLUMNS = (
    "seq",
    "frame_index",
    "index_in_frame",
    "n_packets_in_frame",
    "total_bits",
    "departure_server_time_ns",
    "arrival_client_time_ns",
    "drop_reason",
    "duplicate_flag",
)
DROP_CODES = {"": 0, "random": 1, "overflow": 2}
DROP_NAMES = {v: k for k, v in DROP_CODES.items()}

OUTPUT_DIR_ENV = "NESTSIM_OUTPUT_DIR"


class TraceFormatError(ValueError):
    pass


class SchemaError(ValueError):
    pass


class RunMismatchError(ValueError):
    pass


def _io_error(path, exc: OSError) -> OSError:
    return type(exc)(exc.errno, f"{exc.strerror}: {path}")


def _read_text(path) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise _io_error(path, exc) from exc


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise _io_error(path, exc) from exc


def output_dir(default="results") -> Path:
    """Results root: ``$NESTSIM_OUTPUT_DIR`` if set, else ``default``."""
    return Path(os.environ.get(OUTPUT_DIR_ENV) or default)


def make_run_id(document: dict, session: int = 0) -> str:
    blob = json.dumps(document, sort_keys=True, separators=(",", ":")) + f"#{session}"
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _header_line(magic: str, run_id: str, extra: dict | None = None) -> str:
    parts = [f"# {magic} v{TRACE_VERSION}", f"run_id={run_id}"]
    for k, v in (extra or {}).items():
        parts.append(f"{k}={v}")
    return " ".join(parts)


def _parse_header(line: str, magic: str, path) -> dict:
    tokens = line.strip().split()
    if len(tokens) < 3 or tokens[0] != "#" or tokens[1] != magic:
        raise TraceFormatError(f"{path}: missing '{magic}' header line")
    version = tokens[2]
    if version != f"v{TRACE_VERSION}":
        raise TraceFormatError(f"{path}: unsupported version {version}")
    meta = {"version": TRACE_VERSION}
    for tok in tokens[3:]:
        key, _, value = tok.partition("=")
        meta[key] = value
    if "run_id" not in meta:
        raise TraceFormatError(f"{path}: header lacks run_id")
    return meta


# packet traces

@dataclass
class Trace:
    """One row per packet event; duplicates carry a set flag.

    A row was delivered iff its drop reason is 0. Client arrival times may be
    negative (the client clock offset is signed); dropped rows store -1.
    """

    run_id: str
    seq: np.ndarray
    frame_index: np.ndarray
    index_in_frame: np.ndarray
    n_packets_in_frame: np.ndarray
    total_bits: np.ndarray
    departure_ns: np.ndarray
    arrival_client_ns: np.ndarray
    drop_reason: np.ndarray
    duplicate: np.ndarray

    def __len__(self) -> int:
        return len(self.seq)

    @property
    def delivered(self) -> np.ndarray:
        return self.drop_reason == 0

    def drop_counts(self) -> dict:
        return {name or "delivered": int(np.count_nonzero(self.drop_reason == code))
                for name, code in DROP_CODES.items()}

    def equals(self, other: Trace) -> bool:
        return self.run_id == other.run_id and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in _TRACE_FIELDS)


_TRACE_FIELDS = ("seq", "frame_index", "index_in_frame", "n_packets_in_frame", "total_bits",
                 "departure_ns", "arrival_client_ns", "drop_reason", "duplicate")


def make_trace(run_id: str, seq, frame_index, index_in_frame, n_packets_in_frame, total_bits,
               departure_ns, arrival_client_ns, drop_reason, duplicate) -> Trace:
    """Build a trace with rows in canonical order: by seq, originals first, then by arrival."""
    cols = [np.asarray(c, np.int64) for c in (seq, frame_index, index_in_frame, n_packets_in_frame,
                                              total_bits, departure_ns, arrival_client_ns)]
    drop_reason = np.asarray(drop_reason, np.int8)
    duplicate = np.asarray(duplicate, bool)
    order = np.lexsort((cols[6], duplicate, cols[0]))
    cols = [c[order] for c in cols]
    return Trace(run_id, *cols, drop_reason[order], duplicate[order])


def trace_from_result(res, run_id: str) -> Trace:
    """Packet trace of a finished :class:`~nestsim.sim.SessionResult`."""
    f = res.fates
    row = f["seq"] - 1
    p = res.packets
    arrival = np.where(f["reason"] == 0, f["arrival_ns"] + res.client_offset_ns, -1)
    return make_trace(run_id, f["seq"], p.frame_index[row], p.index_in_frame[row], p.n_packets_in_frame[row],
                      p.total_bits[row], p.departure_ns[row], arrival, f["reason"], f["duplicate"])


def write_trace(trace: Trace, path) -> None:
    lines = [_header_line(TRACE_MAGIC, trace.run_id), ",".join(TRACE_COLUMNS)]
    reason = [DROP_NAMES[c] for c in trace.drop_reason.tolist()]
    arrival = [str(a) if c == 0 else "" for a, c in zip(trace.arrival_client_ns.tolist(),
                                                         trace.drop_reason.tolist())]
    for row in zip(trace.seq.tolist(), trace.frame_index.tolist(), trace.index_in_frame.tolist(),
                   trace.n_packets_in_frame.tolist(), trace.total_bits.tolist(), trace.departure_ns.tolist(),
                   arrival, reason, trace.duplicate.astype(np.int8).tolist()):
        lines.append("%d,%d,%d,%d,%d,%d,%s,%s,%d" % row)
    _write_text(path, "\n".join(lines) + "\n")


def read_trace(path) -> Trace:
    text = _read_text(path)
    lines = text.splitlines()
    if not lines:
        raise TraceFormatError(f"{path}: empty file")
    meta = _parse_header(lines[0], TRACE_MAGIC, path)
    if len(lines) < 2 or tuple(lines[1].split(",")) != TRACE_COLUMNS:
        raise TraceFormatError(f"{path}: column header must be {','.join(TRACE_COLUMNS)}")
    fast = _read_rows_fast(lines[2:])
    if fast is not None:
        ints, arrival, reason, dup = fast
        return Trace(meta["run_id"], *(ints[:, k].copy() for k in range(6)), arrival, reason, dup)
    rows = list(csv.reader(lines[2:]))
    n = len(rows)
    ints = np.empty((n, 6), np.int64)
    arrival = np.empty(n, np.int64)
    reason = np.empty(n, np.int8)
    dup = np.empty(n, bool)
    for i, r in enumerate(rows):
        if len(r) != len(TRACE_COLUMNS):
            raise TraceFormatError(f"{path}: line {i + 3} has {len(r)} fields, expected {len(TRACE_COLUMNS)}")
        try:
            ints[i] = [int(x) for x in r[:6]]
            reason[i] = DROP_CODES[r[7]]
            if (r[6] == "") != (reason[i] != 0):
                raise ValueError("arrival must be empty exactly when the packet was dropped")
            arrival[i] = int(r[6]) if r[6] != "" else -1
            if r[8] not in ("0", "1"):
                raise ValueError(r[8])
            dup[i] = r[8] == "1"
        except (ValueError, KeyError) as exc:
            raise TraceFormatError(f"{path}: line {i + 3}: bad value {exc}") from exc
    return Trace(meta["run_id"], *(ints[:, k].copy() for k in range(6)), arrival, reason, dup)


_DROP_NUMERIC = str.maketrans("", "", "0123456789-,\n")


def _read_rows_fast(lines: list[str]):
    """Whole-file numeric parse of well-formed rows; ``None`` if anything looks off.

    Drop reasons and empty arrivals are rewritten to numbers so every row
    becomes nine integers.
    """
    n = len(lines)
    if n == 0:
        return np.zeros((0, 6), np.int64), np.zeros(0, np.int64), np.zeros(0, np.int8), np.zeros(0, bool)
    body = "\n".join(lines)
    body = body.replace(",,random,", ",-1,1,").replace(",,overflow,", ",-1,2,").replace(",,", ",0,")
    if "random" in body or "overflow" in body or '"' in body or ",," in body or body.startswith(","):
        return None
    if body.translate(_DROP_NUMERIC) or body.count(",") != 8 * n:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        try:
            values = np.fromstring(body.replace("\n", ","), dtype=np.int64, sep=",")
        except (ValueError, DeprecationWarning):
            return None
    if len(values) != 9 * n:
        return None
    table = values.reshape(n, 9)
    if np.any((table[:, 8] != 0) & (table[:, 8] != 1)) or np.any((table[:, 7] < 0) | (table[:, 7] > 2)):
        return None
    return table[:, :6], table[:, 6], table[:, 7].astype(np.int8), table[:, 8] == 1


# stats feedback

@dataclass
class FeedbackLog:
    run_id: str
    frame_index: np.ndarray
    arrival_server_ns: np.ndarray

    def __len__(self) -> int:
        return len(self.frame_index)

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.frame_index.tolist(), self.arrival_server_ns.tolist()))


def feedback_from_engine(engine, run_id: str) -> FeedbackLog:
    fb = engine.feedback
    frames = np.array(sorted(fb), np.int64)
    return FeedbackLog(run_id, frames, np.array([fb[f] for f in frames.tolist()], np.int64))


def write_feedback(log: FeedbackLog, path) -> None:
    lines = [_header_line(FEEDBACK_MAGIC, log.run_id), "frame_index,feedback_server_time_ns"]
    lines += [f"{f},{t}" for f, t in zip(log.frame_index.tolist(), log.arrival_server_ns.tolist())]
    _write_text(path, "\n".join(lines) + "\n")


def read_feedback(path) -> FeedbackLog:
    lines = _read_text(path).splitlines()
    if not lines:
        raise TraceFormatError(f"{path}: empty file")
    meta = _parse_header(lines[0], FEEDBACK_MAGIC, path)
    try:
        pairs = [tuple(int(x) for x in ln.split(",")) for ln in lines[2:] if ln]
    except ValueError as exc:
        raise TraceFormatError(f"{path}: {exc}") from exc
    arr = np.array(pairs, np.int64).reshape(-1, 2)
    return FeedbackLog(meta["run_id"], arr[:, 0].copy(), arr[:, 1].copy())


# metric logs

INT_COLUMNS = ("frame_index", "prev_index", "completion_client_ns", "first_departure_ns", "total_bits",
               "n_packets", "packet_loss_count", "feedback_server_ns")
FLOAT_COLUMNS = ("frame_span_s", "peak_throughput_bps", "frame_interarrival_s", "packet_loss_ratio",
                 "throughput_bps", "frame_jitter_s", "packet_jitter_s", "owd_gradient_s", "fowd_s", "vf_rtt_s")
BOOL_COLUMNS = ("loss_clamped",)
LOG_COLUMNS = INT_COLUMNS + FLOAT_COLUMNS + BOOL_COLUMNS
# integer columns where -1 stands for "undefined"
_OPTIONAL_INTS = ("prev_index", "packet_loss_count", "feedback_server_ns")


@dataclass
class MetricLog:
    """Per-frame metric records of one stream, columnar.

    Undefined float metrics are NaN; undefined optional integers are -1.
    """

    header: dict
    columns: dict
    abandoned: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    @property
    def run_id(self) -> str:
        return self.header["run_id"]

    def __len__(self) -> int:
        return len(self.columns["frame_index"])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def records(self) -> list[dict]:
        cols = {k: self.columns[k].tolist() for k in LOG_COLUMNS}
        out = []
        for i in range(len(self)):
            rec = {}
            for k in LOG_COLUMNS:
                v = cols[k][i]
                if k in _OPTIONAL_INTS and v < 0:
                    v = None
                elif isinstance(v, float) and math.isnan(v):
                    v = None
                rec[k] = v
            out.append(rec)
        return out


def empty_columns(n: int = 0) -> dict:
    cols = {k: np.full(n, -1, np.int64) for k in INT_COLUMNS}
    cols.update({k: np.full(n, np.nan) for k in FLOAT_COLUMNS})
    cols.update({k: np.zeros(n, bool) for k in BOOL_COLUMNS})
    return cols


def metric_log_from_engine(engine, run_id: str, client_offset_ns: int = 0) -> MetricLog:
    t = engine.table()
    has = t.has_prev
    fb = engine.feedback
    fb_ns = np.array([fb.get(f, -1) for f in t.frame_index.tolist()], np.int64)
    nan = np.nan
    cols = {
        "frame_index": t.frame_index,
        "prev_index": t.prev_index,
        "completion_client_ns": t.completion_client_ns,
        "first_departure_ns": t.first_departure_ns,
        "total_bits": t.total_bits,
        "n_packets": t.n_packets,
        "packet_loss_count": t.lost,
        "feedback_server_ns": fb_ns,
        "frame_span_s": t.span_ns / NS_PER_S,
        "peak_throughput_bps": t.peak_bps,
        "frame_interarrival_s": np.where(has, t.interarrival_ns / NS_PER_S, nan),
        "packet_loss_ratio": t.loss_ratio,
        "throughput_bps": t.throughput_bps,
        "frame_jitter_s": t.frame_jitter_s,
        "packet_jitter_s": np.where(has, t.packet_jitter_ns / NS_PER_S, nan),
        "owd_gradient_s": np.where(has, t.owd_ns / NS_PER_S, nan),
        "fowd_s": np.where(has, t.fowd_s, nan),
        "vf_rtt_s": np.where(fb_ns >= 0, (fb_ns - t.first_departure_ns) / NS_PER_S, nan),
        "loss_clamped": t.loss_clamped,
    }
    header = {
        "kind": "header",
        "format": METRICS_FORMAT,
        "version": TRACE_VERSION,
        "run_id": run_id,
        "deadline_ns": engine.deadline_ns,
        "jitter_window": engine.jitter_window,
        "overhead_bits": engine.overhead_bits,
        "client_offset_ns": client_offset_ns,
    }
    return MetricLog(header, {k: np.asarray(v).copy() for k, v in cols.items()},
                     np.array(sorted(engine.abandoned), np.int64))


def write_metrics(log: MetricLog, path) -> None:
    lines = [json.dumps(log.header)]
    lines += [json.dumps({"kind": "frame", **rec}) for rec in log.records()]
    lines.append(json.dumps({"kind": "abandoned", "frames": log.abandoned.tolist()}))
    _write_text(path, "\n".join(lines) + "\n")


def _jsonl(path) -> list[dict]:
    out = []
    for i, line in enumerate(_read_text(path).splitlines()):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise TraceFormatError(f"{path}: line {i + 1}: {exc.msg}") from exc
    return out


def read_metrics(path) -> MetricLog:
    docs = _jsonl(path)
    if not docs or docs[0].get("kind") != "header" or docs[0].get("format") != METRICS_FORMAT:
        raise TraceFormatError(f"{path}: missing metric-log header")
    header = docs[0]
    frames = [d for d in docs[1:] if d.get("kind") == "frame"]
    cols = empty_columns(len(frames))
    for i, rec in enumerate(frames):
        for k in LOG_COLUMNS:
            v = rec.get(k)
            if v is not None:
                cols[k][i] = v
    abandoned = []
    for d in docs[1:]:
        if d.get("kind") == "abandoned":
            abandoned.extend(d["frames"])
    return MetricLog(header, cols, np.array(sorted(abandoned), np.int64))


# decision logs

def write_decisions(decisions, path, run_id: str, controller: str) -> None:
    lines = [json.dumps({"kind": "header", "format": DECISIONS_FORMAT, "version": TRACE_VERSION,
                         "run_id": run_id, "controller": controller})]
    lines += [json.dumps(d.to_dict()) for d in decisions]
    _write_text(path, "\n".join(lines) + "\n")


def read_decisions(path) -> tuple[dict, list[dict]]:
    docs = _jsonl(path)
    if not docs or docs[0].get("format") != DECISIONS_FORMAT:
        raise TraceFormatError(f"{path}: missing decision-log header")
    return docs[0], docs[1:]


# summaries

def summarize_logs(log: MetricLog, decisions: list[dict], intervals) -> list[dict]:
    """Per-interval table recomputed from a metric log and a decision log."""
    from .sim import interval_summary, summary_series
    c = log.columns
    series = summary_series(c["frame_index"], c["completion_client_ns"], c["first_departure_ns"],
                            c["prev_index"], c["packet_loss_count"], c["feedback_server_ns"],
                            [d["time_s"] for d in decisions], [d["bitrate"] for d in decisions],
                            log.header.get("client_offset_ns", 0))
    return [interval_summary(series, a, b) for a, b in intervals]


def parse_intervals(text: str) -> list[tuple[float, float]]:
    """``"20-40,60-80"`` -> ``[(20.0, 40.0), (60.0, 80.0)]``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        a, sep, b = part.partition("-")
        try:
            lo, hi = float(a), float(b)
        except ValueError:
            raise ValueError(f"bad interval {part!r}; expected start-end in seconds") from None
        if not sep or not hi > lo:
            raise ValueError(f"bad interval {part!r}; expected start-end with end > start")
        out.append((lo, hi))
    if not out:
        raise ValueError("no intervals given")
    return out


def write_json(doc, path) -> None:
    _write_text(path, json.dumps(doc, indent=2) + "\n")


def read_json(path):
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc


# schemas

@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    return json.loads(resources.files("nestsim").joinpath("data", name).read_text())


SCENARIO_SCHEMA = "scenario.schema.json"
MANIFEST_SCHEMA = "manifest.schema.json"


def validate_document(doc, schema, source: str = "document") -> None:
    """Raise :class:`SchemaError` naming the offending field if ``doc`` does not match."""
    if isinstance(schema, str):
        schema = load_schema(schema)
    validator = jsonschema.Draft202012Validator(schema)
    error = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if error is None:
        return
    path = ".".join(str(p) for p in error.absolute_path)
    if error.validator == "required":
        missing = error.message.split("'")[1] if "'" in error.message else "?"
        path = f"{path}.{missing}" if path else missing
    elif error.validator == "additionalProperties":
        extra = error.message.split("'")[1] if "'" in error.message else "?"
        path = f"{path}.{extra}" if path else extra
    raise SchemaError(f"{source}: field '{path or '<root>'}': {error.message}")


# trace-driven metrics

def replay_trace(trace: Trace, feedback: FeedbackLog | dict | None = None, *, deadline_s: float = 0.050,
                 jitter_window: int = 16, overhead_bits: int | None = None, cuts=None):
    """Run a :class:`~nestsim.metrics.MetricsEngine` over the received packets of a trace.

    Arrivals are offered in (arrival, seq, duplicate) order; ``cuts`` splits
    that stream into consecutive batches at the given row positions.
    Feedback times are paired with the frames they name.
    """
    from .metrics import MetricsEngine
    kwargs = {} if overhead_bits is None else {"overhead_bits": overhead_bits}
    engine = MetricsEngine(deadline_s=deadline_s, jitter_window=jitter_window, **kwargs)
    got = np.flatnonzero(trace.delivered)
    order = got[np.lexsort((trace.duplicate[got], trace.seq[got], trace.arrival_client_ns[got]))]
    bounds = [0, *sorted(set(int(c) for c in (cuts or ()) if 0 < c < len(order))), len(order)]
    for a, b in zip(bounds[:-1], bounds[1:]):
        rows = order[a:b]
        engine.on_batch(trace.seq[rows], trace.frame_index[rows], trace.n_packets_in_frame[rows],
                        trace.total_bits[rows], trace.departure_ns[rows], trace.arrival_client_ns[rows])
    engine.finalize()
    if feedback is not None:
        from .model import StatsFeedback
        fb = feedback.as_dict() if isinstance(feedback, FeedbackLog) else feedback
        for f, t in sorted(fb.items()):
            engine.on_feedback(StatsFeedback(f, -1, t))
    return engine
