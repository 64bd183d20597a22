"""Traffic generation and the session simulator."""

import math

import numpy as np
import pytest

from nestsim.abr import MBPS, CbrController, NestVrConfig, NestVrController
from nestsim.netem import LinkScenario, Phase
from nestsim.sim import Session, run_multi_session, run_session, summarize_result
from nestsim.traffic import TrafficConfig, burst_arrays, frame_payload_bits, generate_frame

IDEAL = LinkScenario(base_propagation_s=0.001, uplink_delay_s=0.001)


def test_frame_100mbps():
    pk = generate_frame(TrafficConfig(), 100 * MBPS, 1, 0)
    assert len(pk) == 100
    assert sum(p.payload_bits for p in pk) == pytest.approx(100e6 / 90, abs=8)
    assert max(p.payload_bits for p in pk) == 1400 * 8
    assert {p.departure_ns for p in pk} == {0}


def test_frame_10mbps():
    assert len(generate_frame(TrafficConfig(), 10 * MBPS, 1, 0)) == 10


def test_deterministic_sizes():
    sizes = frame_payload_bits(TrafficConfig(), 50 * MBPS, np.arange(1, 200))
    assert len(set(sizes.tolist())) == 1


def test_size_jitter_needs_rng():
    cfg = TrafficConfig(sigma_rel=0.2)
    with pytest.raises(ValueError):
        frame_payload_bits(cfg, 50 * MBPS, [1])
    sizes = frame_payload_bits(cfg, 50 * MBPS, np.arange(1, 500), np.random.default_rng(0))
    assert sizes.std() > 0 and np.all(sizes % 8 == 0)


def test_large_frames():
    sizes = frame_payload_bits(TrafficConfig(large_frame_factor=3, large_frame_period=10), 30 * MBPS,
                               np.arange(1, 31))
    assert sizes[9] == pytest.approx(3 * sizes[0], abs=16)


def test_burst_arrays_match_fragmentation():
    payload = np.array([30000, 1, 11200 * 4])
    pos, idx, npk, pay = burst_arrays(payload, 11200)
    assert pos.tolist() == [0, 0, 0, 1, 2, 2, 2, 2]
    assert idx.tolist() == [1, 2, 3, 1, 1, 2, 3, 4]
    assert pay.tolist() == [11200, 11200, 7600, 1, 11200, 11200, 11200, 11200]
    assert npk.tolist() == [3, 3, 3, 1, 4, 4, 4, 4]


@pytest.mark.parametrize("fps", [60.0, 72.0, 90.0, 120.0])
def test_frame_cadence(fps):
    cfg = TrafficConfig(fps=fps)
    deps = cfg.frame_departure_ns(np.arange(int(fps) * 3 + 1))
    gaps = np.diff(deps)
    assert gaps.max() - gaps.min() <= 1
    assert deps[int(fps)] == 1_000_000_000


def test_traffic_validation():
    for kw in (dict(fps=0), dict(sigma_rel=-1), dict(large_frame_factor=0), dict(max_packet_payload_bits=0)):
        with pytest.raises(ValueError):
            TrafficConfig(**kw)


def cbr(rate=100 * MBPS):
    return CbrController(rate)


def test_ideal_link_baseline():
    res = run_session(TrafficConfig(), IDEAL, cbr(), 10.0, seed=0)
    t = res.frames
    assert len(t) == 900 and not res.engine.abandoned
    assert res.ledger.counts()["random_loss"] == res.ledger.counts()["queue_overflow"] == 0
    rows = summarize_result(res, [(1, 9)])
    assert rows[0]["fdr_mean_fps"] == 90 and rows[0]["fdr_std_fps"] == 0
    assert rows[0]["packets_lost"] == 0
    # 1 Gbps sender NIC serializes the burst, then 1 ms each way
    burst = 100 * 11568 / 1e9
    assert rows[0]["vf_rtt_mean_s"] == pytest.approx(burst + 0.002, rel=0.01)


def test_fdr_never_exceeds_fps():
    scen = LinkScenario((Phase(0, math.inf, 80e6, jitter_max_s=0.005, dup_prob=0.01),))
    res = run_session(TrafficConfig(), scen, cbr(), 5.0, seed=2)
    rows = summarize_result(res, [(0, 5)])
    assert rows[0]["fdr_mean_fps"] <= 90


def test_determinism():
    scen = LinkScenario((Phase(0, math.inf, 90e6, loss_prob=0.001, jitter_max_s=0.002),))
    runs = [run_session(TrafficConfig(), scen, NestVrController(NestVrConfig(seed=3)), 8.0, seed=9)
            for _ in range(2)]
    a, b = runs
    for col in a.frames.COLUMNS:
        assert np.array_equal(getattr(a.frames, col), getattr(b.frames, col), equal_nan=True)
    assert [d.to_dict() for d in a.decisions] == [d.to_dict() for d in b.decisions]
    assert a.engine.feedback == b.engine.feedback


def test_single_session_reduction():
    scen = LinkScenario((Phase(0, math.inf, 90e6, loss_prob=0.001),))
    a = run_session(TrafficConfig(), scen, cbr(), 3.0, seed=4)
    b = run_multi_session([Session(cbr(), TrafficConfig())], scen, 3.0, seed=4)[0]
    assert np.array_equal(a.frames.completion_client_ns, b.frames.completion_client_ns)
    assert a.ledger.counts() == b.ledger.counts()


def test_two_cbr_sessions_overload_shared_pipe():
    scen = LinkScenario((Phase(0, math.inf, 150e6),))
    res = run_multi_session([Session(cbr(), name="a"), Session(cbr(), name="b")], scen, 6.0, seed=1)
    for r in res:
        rows = summarize_result(r, [(2, 6)])
        assert len(r.ledger.queue_overflow) > 0
        assert rows[0]["fdr_mean_fps"] < 90


def test_decisions_every_period():
    res = run_session(TrafficConfig(), IDEAL, cbr(), 5.0)
    assert [d.time_s for d in res.decisions] == [1.0, 2.0, 3.0, 4.0]


def test_session_start_offset():
    res = run_multi_session([Session(cbr(), start_s=2.0)], IDEAL, 4.0)[0]
    assert res.packets.departure_ns.min() == 2_000_000_000
    assert [d.time_s for d in res.decisions] == [3.0]


def test_tracking_and_audio():
    traffic = TrafficConfig(include_tracking_uplink=True, audio_bitrate_bps=128e3)
    res = run_session(traffic, IDEAL, cbr(), 1.0)
    assert res.uplink_bits >= 90 * 3 * 207 * 8
    assert len(res.frames) == 90


def test_feedback_after_completion():
    res = run_session(TrafficConfig(), IDEAL, cbr(), 2.0)
    t = res.frames
    fb = res.engine.feedback
    for f, comp in zip(t.frame_index.tolist(), t.completion_client_ns.tolist()):
        assert fb[f] == comp + 1_000_000


def test_run_validation():
    with pytest.raises(ValueError):
        run_multi_session([], IDEAL, 1.0)
    with pytest.raises(ValueError):
        run_session(TrafficConfig(), IDEAL, cbr(), 0.0)


def test_summary_intervals_are_exact_recomputation():
    scen = LinkScenario((Phase(0, math.inf, 95e6),))
    res = run_session(TrafficConfig(), scen, cbr(), 6.0, seed=1)
    row = summarize_result(res, [(2, 6)])[0]
    t = res.frames
    comp = (t.completion_client_ns - res.client_offset_ns) / 1e9
    inside = (comp >= 2) & (comp < 6)
    counts = np.bincount(np.floor(comp[inside] - 2).astype(int), minlength=4)
    assert row["fdr_mean_fps"] == counts.mean()
    assert row["packets_lost"] == int(t.lost[inside & t.has_prev].sum())
    br = [d.bitrate for d in res.decisions if 2 <= d.time_s < 6]
    assert row["bitrate_mean_bps"] == np.mean(br)
