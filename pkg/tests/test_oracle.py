"""Independent oracle: agreement, sensitivity, accounting and refusal cases."""

import ast
import copy
from pathlib import Path

import numpy as np
import pytest

import nestsim.oracle as oracle
from nestsim.abr import NestVrConfig, NestVrController
from nestsim.netem import LinkScenario, Phase
from nestsim.oracle import check, compare, recompute, validate_files
from nestsim.sim import run_session
from nestsim.synth import random_params, synthetic_run
from nestsim.traceio import (
    Trace,
    feedback_from_engine,
    make_trace,
    metric_log_from_engine,
    replay_trace,
    trace_from_result,
    write_feedback,
    write_metrics,
    write_trace,
)
from nestsim.traffic import TrafficConfig


@pytest.fixture(scope="module")
def sim_run():
    scen = LinkScenario((Phase(0, 100, 70e6, loss_prob=0.003, jitter_max_s=0.004, dup_prob=0.003),))
    res = run_session(TrafficConfig(), scen, NestVrController(NestVrConfig(seed=2)), 6.0, seed=11,
                      client_offset_ns=-4_000_000_000)
    trace = trace_from_result(res, "sim")
    log = metric_log_from_engine(res.engine, "sim", res.client_offset_ns)
    return res, trace, log, feedback_from_engine(res.engine, "sim")


def test_oracle_does_not_share_metric_code():
    tree = ast.parse(Path(oracle.__file__).read_text())
    imported = set()
    for node in ast.walk(tree):
        if isinstance(node, ast.ImportFrom):
            imported.add((node.module, tuple(a.name for a in node.names)))
        elif isinstance(node, ast.Import):
            imported.update((a.name, ()) for a in node.names)
    modules = {m for m, _ in imported}
    assert "metrics" not in modules and "sim" not in modules
    assert ("_kernels", ("njit",)) in imported


def test_simulated_run_passes(sim_run):
    res, trace, log, fb = sim_run
    report = check(trace, log, fb)
    assert report.passed, report.format()
    assert all(v <= 1e-9 for v in report.deviations.values())
    assert report.frames_logged == len(res.frames) > 400
    assert len(log.abandoned) > 0


@pytest.mark.parametrize("seed", range(0, 400, 7))
def test_synthetic_runs_pass(seed):
    run = synthetic_run(seed)
    report = check(run.trace, run.log, run.feedback)
    assert report.passed, (run.params.to_dict(), report.format())


def _perturbed(trace: Trace, row: int, delta_ns: int) -> Trace:
    arr = trace.arrival_client_ns.copy()
    arr[row] += delta_ns
    return make_trace(trace.run_id, trace.seq, trace.frame_index, trace.index_in_frame, trace.n_packets_in_frame,
                      trace.total_bits, trace.departure_ns, arr, trace.drop_reason, trace.duplicate)


def _pick(trace, log, which):
    """Row of an original packet of an accepted frame with room to move 1 µs without reordering."""
    accepted = set(log["frame_index"][1:-1].tolist())
    ok = (trace.arrival_client_ns >= 0) & ~trace.duplicate
    arr = np.sort(trace.arrival_client_ns[trace.arrival_client_ns >= 0])
    for row in np.flatnonzero(ok):
        f = int(trace.frame_index[row])
        if f not in accepted or trace.n_packets_in_frame[row] < 3:
            continue
        mine = ok & (trace.frame_index == f)
        a = trace.arrival_client_ns[row]
        last = a == trace.arrival_client_ns[mine].max()
        first = a == trace.arrival_client_ns[mine].min()
        nxt = arr[np.searchsorted(arr, a, side="right"):][:1]
        room = len(nxt) and nxt[0] - a > 2000 and np.count_nonzero(arr == a) == 1
        if not room:
            continue
        if which == "middle" and not (first or last):
            return row
        if which == "last" and last and np.count_nonzero(trace.arrival_client_ns[mine] == a) == 1:
            return row
    raise AssertionError("no suitable packet")


def test_perturbed_middle_packet_flags_only_packet_jitter(sim_run):
    _, trace, log, fb = sim_run
    report = check(_perturbed(trace, _pick(trace, log, "middle"), 1000), log, fb)
    assert not report.passed
    assert report.failing == ["packet_jitter_s"]
    assert report.accounting_ok


def test_perturbed_completing_packet_flags_timing_metrics(sim_run):
    _, trace, log, fb = sim_run
    report = check(_perturbed(trace, _pick(trace, log, "last"), 1000), log, fb)
    failing = set(report.failing)
    assert {"frame_span_s", "peak_throughput_bps", "frame_interarrival_s", "owd_gradient_s",
            "completion_client_ns", "packet_jitter_s"} <= failing
    for untouched in ("vf_rtt_s", "packet_loss_count", "packet_loss_ratio", "total_bits", "n_packets",
                      "first_departure_ns", "feedback_server_ns", "loss_clamped"):
        assert untouched not in failing


def test_empty_trace_passes():
    empty = make_trace("e", *([np.zeros(0, np.int64)] * 7), np.zeros(0, np.int8), np.zeros(0, bool))
    engine = replay_trace(empty)
    log = metric_log_from_engine(engine, "e")
    report = check(empty, log)
    assert report.passed and report.deviations and report.frames_logged == 0


def test_all_dropped_trace():
    t = make_trace("d", [1, 2], [1, 1], [1, 2], [2, 2], [100, 100], [0, 0], [-1, -1], [1, 2], [False, False])
    assert check(t, metric_log_from_engine(replay_trace(t), "d")).passed


def test_tampered_value_detected(sim_run):
    _, trace, log, fb = sim_run
    bad = copy.deepcopy(log)
    bad.columns["fowd_s"][10] *= 1 + 1e-6
    report = check(trace, bad, fb)
    assert report.failing == ["fowd_s"]


def test_accounting_differences_detected(sim_run):
    _, trace, log, fb = sim_run
    bad = copy.deepcopy(log)
    bad.columns["prev_index"][5] += 1
    bad.abandoned = bad.abandoned[1:]
    report = check(trace, bad, fb)
    assert report.prev_mismatch == [int(log["frame_index"][5])]
    assert report.abandoned_missing == [int(log.abandoned[0])]
    assert not report.passed


def test_missing_frame_detected(sim_run):
    _, trace, log, fb = sim_run
    ref = recompute(trace, fb, int(log.header["deadline_ns"]), int(log.header["jitter_window"]))
    keep = np.ones(len(log), bool)
    keep[3] = False
    cut = copy.deepcopy(log)
    cut.columns = {k: v[keep] for k, v in log.columns.items()}
    report = compare(cut, ref)
    assert report.missing_frames == [int(log["frame_index"][3])]


def test_unpaired_feedback_detected(sim_run):
    _, trace, log, fb = sim_run
    extra = fb.as_dict()
    extra[int(log.abandoned[0])] = 123
    assert check(trace, log, extra).unpaired_feedback == [int(log.abandoned[0])]


def test_without_feedback_skips_vfrtt(sim_run):
    _, trace, log, _ = sim_run
    report = check(trace, log)
    assert report.passed and "vf_rtt_s" in report.skipped and "vf_rtt_s" not in report.deviations


def test_validate_files_and_format(sim_run, tmp_path):
    _, trace, log, fb = sim_run
    write_trace(trace, tmp_path / "trace.csv")
    write_metrics(log, tmp_path / "metrics.jsonl")
    write_feedback(fb, tmp_path / "feedback.csv")
    report = validate_files(tmp_path / "trace.csv", tmp_path / "metrics.jsonl")
    assert report.passed and "vf_rtt_s" in report.deviations
    assert report.format().startswith("run sim: PASS")
    assert report.to_dict()["passed"] is True


def test_random_params_ranges():
    rng = np.random.default_rng(0)
    for _ in range(300):
        p = random_params(rng)
        assert 1 <= p.n_frames <= 200
        assert 0 <= p.loss_prob <= 0.02 and 0 <= p.dup_prob <= 0.02 and 0 <= p.jitter_max_s <= 0.02
        assert abs(p.client_offset_ns) <= 5_000_000_000
