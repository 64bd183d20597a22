"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

1. metric oracle equivalence over 10,000 randomized synthetic runs (< 60 s)
2. capacity fluctuation at desk scale for CBR, NeSt-VR balanced and Adaptive
3. NeSt-VR branch conformance against a reference interpreter, anxious law
4. peak-throughput capacity estimate on drain-limited links
5. RFC 3550 jitter and Kalman convergence, clock-offset invariance
6. two NeSt-VR sessions on a shared 150 Mbps pipe, byte-identical reruns
7. NFR above 0.99 under 1e-5 uniform loss in at least 95 of 100 runs

The tolerances are the ones the criteria state; nothing is loosened to
make a check pass.
"""

import filecmp
import math
import random
import time
from pathlib import Path

import numpy as np
import pytest

from nestsim.abr import MBPS, BitrateLadder, CbrController, NestVrConfig, NestVrController
from nestsim.metrics import JitterState, MetricsEngine, packet_jitter_update
from nestsim.model import PacketRecord
from nestsim.netem import LinkScenario, Phase
from nestsim.oracle import check
from nestsim.runner import build_sessions, execute, load_manifest
from nestsim.sim import run_multi_session, run_session, summarize_result
from nestsim.synth import synthetic_run
from nestsim.traffic import TrafficConfig

ROOT = Path(__file__).resolve().parents[1]
MANIFESTS = ROOT / "manifests"
LADDER = BitrateLadder(10 * MBPS, 100 * MBPS, 9)
PHASES = [(20.0, 40.0, 100e6), (60.0, 80.0, 95e6), (100.0, 120.0, 90e6)]


# 1

def test_criterion_1_oracle_equivalence(verdict):
    n_runs = 10_000
    t0 = time.perf_counter()
    failures, frames, abandoned, clamped = [], 0, 0, 0
    for seed in range(n_runs):
        run = synthetic_run(seed)
        report = check(run.trace, run.log, run.feedback)
        if not report.passed:
            failures.append(seed)
        frames += len(run.log)
        abandoned += len(run.log.abandoned)
        clamped += int(run.log["loss_clamped"].sum())
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60
    verdict("1", ok, f"{n_runs} runs, {len(failures)} mismatching, {frames} frames "
                     f"({abandoned} abandoned, {clamped} loss-clamped), {elapsed:.1f} s (budget 60 s)")
    assert not failures, failures[:20]
    assert elapsed < 60


# 2

def run_fluct(kind):
    manifest = load_manifest(MANIFESTS / f"capacity_fluct_{kind}.json")
    sessions, scenario = build_sessions(manifest)
    t0 = time.perf_counter()
    res = run_multi_session(sessions, scenario, manifest["duration_s"], manifest["seed"])[0]
    return res, time.perf_counter() - t0


def overflow_times(res):
    seqs = np.array([q for _, q in res.ledger.queue_overflow], np.int64)
    return res.packets.departure_ns[seqs - 1] / 1e9 if len(seqs) else np.zeros(0)


def bitrate_at(res):
    return [(d.time_s, d.bitrate) for d in res.decisions]


def test_criterion_2_cbr(verdict):
    res, elapsed = run_fluct("cbr")
    drops = overflow_times(res)
    details, ok = [], elapsed < 5
    for a, b, cap in PHASES:
        fdr = summarize_result(res, [(a, b)])[0]["fdr_mean_fps"]
        # sustained: overflow in every second of the phase's second half
        late = [np.count_nonzero((drops >= s) & (drops < s + 1)) for s in np.arange(a + 10, b)]
        sustained = min(late) > 0
        ok &= sustained and fdr < 80
        details.append(f"{cap / 1e6:g}M: overflow/s min {min(late)}, FDR {fdr:.1f}")
    verdict("2 (CBR 100 Mbps)", ok, "; ".join(details) + f"; {elapsed:.2f} s")
    assert ok


def test_criterion_2_nestvr(verdict):
    res, elapsed = run_fluct("nestvr")
    rates = bitrate_at(res)
    drops = overflow_times(res)
    step = LADDER.step
    downs = [(t, prev - cur) for (_, prev), (t, cur) in zip(rates, rates[1:]) if cur < prev]
    bad_steps = [(t, d / 1e6) for t, d in downs if not math.isclose(d, step)]
    details, ok = [], elapsed < 5
    for a, b, cap in PHASES:
        hi = LADDER.floor(0.9 * cap)
        steady = [r for t, r in rates if b - 10 <= t < b]
        in_band = all(hi - step <= r <= hi for r in steady)
        over = int(np.count_nonzero((drops >= b - 10) & (drops < b)))
        fdr = summarize_result(res, [(b - 10, b)])[0]["fdr_mean_fps"]
        ok &= in_band and over == 0 and fdr >= 89
        details.append(f"{cap / 1e6:g}M: steady {sorted({r / 1e6 for r in steady})} in "
                       f"[{(hi - step) / 1e6:g},{hi / 1e6:g}], overflow {over}, FDR {fdr:.1f}")
    steps_ok = not bad_steps
    details.insert(0, "descents all 10 Mbps" if steps_ok else f"non-10 Mbps descents (t s, Mbps) {bad_steps}")
    ok &= steps_ok
    verdict("2 (NeSt-VR balanced)", ok, "; ".join(details) + f"; {elapsed:.2f} s")
    assert ok


def test_criterion_2_adaptive(verdict):
    res, elapsed = run_fluct("adaptive")
    rates = bitrate_at(res)
    details, ok = [], elapsed < 5
    for a, b, cap in PHASES:
        early = [(t, r) for t, r in rates if a < t <= a + 5]
        low = min(r for _, r in early)
        hit = [t for t, r in early if r == LADDER.b_min]
        recovered = bool(hit) and any(r > 40 * MBPS for t, r in rates if hit[0] < t <= b)
        peak_after = max((r for t, r in rates if hit and hit[0] < t <= b), default=float("nan"))
        ok &= bool(hit) and recovered
        details.append(f"{cap / 1e6:g}M: min within 5 s {low / 1e6:.1f} Mbps, "
                       f"recovery max {peak_after / 1e6:.1f} Mbps")
    verdict("2 (Adaptive)", ok, "; ".join(details) + f"; {elapsed:.2f} s")
    assert ok


# 3

def reference_alg1(b_prev, nfr, rtt, cap, cfg, draws, literal=False):
    """Hand-written reading of the NeSt-VR rule on bitrate values."""
    b_min, b_max = cfg.b_min, cfg.b_max
    d_b = (b_max - b_min) / cfg.n_steps
    levels = [b_min + i * d_b for i in range(cfg.n_steps + 1)]
    if nfr < cfg.rho:
        b, branch = max(b_prev - cfg.n_dw * d_b, b_min), "down_nfr"
    elif rtt > cfg.sigma:
        if draws.random() <= cfg.gamma_rtt:
            b, branch = max(b_prev - cfg.n_dw * d_b, b_min), "down_rtt"
        else:
            b, branch = b_prev, "hold"
    else:
        if draws.random() <= cfg.gamma_plus:
            b, branch = min(b_prev + cfg.n_up * d_b, b_max), "up"
        else:
            b, branch = b_prev, "hold"
    limit = max(v for v in levels if v <= max(cfg.m * cap, b_min))
    if literal:
        return (limit, "clamped") if limit != b else (b, branch)
    return (limit, "clamped") if limit < b else (b, branch)


def controller_step(cfg, b_prev, nfr, rtt, cap):
    ctrl = NestVrController(cfg)
    ctrl.index = ctrl.ladder.index_of(b_prev)
    ctrl.bitrate = b_prev
    ctrl.nfr = lambda now=None: nfr
    ctrl.vf_rtt = lambda now=None: rtt
    ctrl.estimate_capacity = lambda now=None: cap
    d = ctrl.step(1.0)
    return d.bitrate, d.branch


def conformance_cases():
    huge = 1e12
    rows = [
        ("nfr drop", NestVrConfig(seed=0), 80 * MBPS, 0.95, 0.010, huge, (70 * MBPS, "down_nfr")),
        ("increase", NestVrConfig(seed=0, gamma_plus=1.0), 80 * MBPS, 0.999, 0.010, huge, (90 * MBPS, "up")),
        ("anxious", NestVrConfig.for_profile("anxious", seed=0), 100 * MBPS, 0.9, 0.010, huge,
         (10 * MBPS, "down_nfr")),
        ("clamp", NestVrConfig(seed=0, gamma_plus=1.0), 100 * MBPS, 0.999, 0.010, 90 * MBPS,
         (80 * MBPS, "clamped")),
    ]
    rng = random.Random(2024)
    for i in range(20):
        profile = rng.choice(["balanced", "speedy", "anxious"])
        cfg = NestVrConfig.for_profile(profile, seed=rng.randrange(10**6), n_up=rng.choice([1, 2, 3]),
                                       gamma_plus=rng.random(), gamma_rtt=rng.choice([1.0, rng.random()]))
        rows.append((f"random {i} ({profile})", cfg, rng.choice(LADDER.levels), rng.uniform(0.9, 1.0),
                     rng.uniform(0.005, 0.040), rng.uniform(5e6, 200e6), None))
    return rows


def test_criterion_3_controller_conformance(verdict):
    agree, total, branches, notes = 0, 0, set(), []
    for name, cfg, b_prev, nfr, rtt, cap, expected in conformance_cases():
        for literal in (False, True):
            cfg.clamp_as_upper_bound = not literal
            want = reference_alg1(b_prev, nfr, rtt, cap, cfg, random.Random(cfg.seed), literal)
            got = controller_step(cfg, b_prev, nfr, rtt, cap)
            total += 1
            same = got == want and (expected is None or literal or got == expected)
            agree += same
            branches.add(got[1])
            if not same:
                notes.append(f"{name} literal={literal}: got {got}, reference {want}, expected {expected}")
    law = []
    for b in LADDER.levels:
        got = controller_step(NestVrConfig.for_profile("anxious"), b, 0.5, 0.010, 1e12)
        law.append(got[0] == LADDER.b_min)
    ok = agree == total and all(law)
    verdict("3", ok, f"branch agreement {agree}/{total} (branches seen {sorted(branches)}), "
                     f"anxious law {sum(law)}/{len(law)} start levels" + (f"; {notes}" if notes else ""))
    assert ok, notes


# 4

def test_criterion_4_capacity_estimate(verdict):
    details, ok = [], True
    for cap in (50e6, 90e6, 100e6):
        scen = LinkScenario((Phase(0, 1000, cap),))
        res = run_session(TrafficConfig(), scen, CbrController(0.8 * cap), 10.0, seed=1)
        est = np.array([d.capacity_est for d in res.decisions[2:]])
        err = np.abs(est / cap - 1).max()
        ok &= err <= 0.05
        details.append(f"{cap / 1e6:g}M: estimate {est.mean() / 1e6:.2f} Mbps, worst error {err:.1%}")
    verdict("4", ok, "; ".join(details))
    assert ok


# 5

def test_criterion_5_signal_processing(verdict):
    d = 0.002
    s = JitterState()
    for i in range(201):
        pj = packet_jitter_update(s, PacketRecord(i + 1, 1, 1, 1, 100, 0, 0, 0, round(i * d * 1e9)))
    jitter_ok = abs(pj / d - 1) <= 0.01

    # Kalman through the engine: one-packet frames, constant gradient then steady
    g = 0.001
    eng = MetricsEngine()
    gap = 11_111_111
    comp, fowd = 0, []
    for f in range(1, 302):
        comp += gap + (round(g * 1e9) if 2 <= f <= 101 else 0)
        eng.on_arrival(f, f, 1, 11568, (f - 1) * gap, comp)
    fowd = [fm.fowd_s for fm in eng.completed[1:]]
    conv = abs(fowd[99] / g - 1)
    settle = abs(fowd[199])
    kalman_ok = conv <= 0.05 and settle <= 1e-5

    # offset invariance on a jittery, lossy simulated run
    scen = LinkScenario((Phase(0, 100, 80e6, loss_prob=0.002, jitter_max_s=0.003, dup_prob=0.002),))
    runs = [run_session(TrafficConfig(), scen, NestVrController(NestVrConfig(seed=1)), 6.0, seed=5,
                        client_offset_ns=off) for off in (0, 5_000_000_000, -5_000_000_000)]
    base = runs[0]
    inv_ok = True
    for r in runs[1:]:
        a, b = base.frames, r.frames
        inv_ok &= np.array_equal(a.frame_index, b.frame_index)
        for col in ("owd_ns", "fowd_s", "packet_jitter_ns"):
            inv_ok &= np.array_equal(getattr(a, col), getattr(b, col), equal_nan=True)
        inv_ok &= [fm.vf_rtt_s for fm in base.engine.completed] == [fm.vf_rtt_s for fm in r.engine.completed]
    ok = jitter_ok and kalman_ok and inv_ok
    verdict("5", ok, f"RFC 3550 {pj * 1e3:.5f} ms vs {d * 1e3:g} ms; FOWD error after 100 frames {conv:.2%}, "
                     f"|FOWD| 100 frames after end {settle:.2e} s; offset invariance "
                     f"{'bitwise' if inv_ok else 'BROKEN'} for 0, +5 s, -5 s")
    assert ok


# 6

def test_criterion_6_multi_session(verdict, tmp_path):
    manifest = load_manifest(MANIFESTS / "two_users_nestvr.json")
    out1 = execute(manifest, tmp_path / "a")
    out2 = execute(manifest, tmp_path / "b")
    rates = {}
    over = 0
    for res in out1.results:
        rates[res.name] = [d.bitrate for d in res.decisions if d.time_s >= 40]
        seqs = np.array([q for _, q in res.ledger.queue_overflow], np.int64)
        if len(seqs):
            over += int(np.count_nonzero(res.packets.departure_ns[seqs - 1] >= 40e9))
    combined = max(sum(x) for x in zip(*rates.values()))
    limit = 0.9 * 150e6 + LADDER.step
    files = [p.relative_to(out1.directory) for p in sorted(out1.directory.rglob("*")) if p.is_file()]
    identical = all(filecmp.cmp(out1.directory / f, out2.directory / f, shallow=False) for f in files)
    ok = over == 0 and combined <= limit and identical
    verdict("6", ok, f"steady (40-60 s) overflow {over}, combined bitrate max {combined / 1e6:g} Mbps "
                     f"(limit {limit / 1e6:g}), {len(files)} files byte-identical across reruns: {identical}")
    assert ok


# 7

def test_criterion_7_nfr_under_loss(verdict):
    scen = LinkScenario.load(ROOT / "scenarios" / "loss_1e-5.json")
    nfrs = []
    for seed in range(100):
        res = run_session(TrafficConfig(), scen, CbrController(100 * MBPS), 60.0, seed=seed)
        values = [d.nfr_avg for d in res.decisions if d.nfr_avg is not None]
        nfrs.append(float(np.mean(values)))
    above = sum(v > 0.99 for v in nfrs)
    ok = above >= 95
    verdict("7", ok, f"avg NFR > 0.99 in {above}/100 runs (min {min(nfrs):.4f}, median {np.median(nfrs):.4f})")
    assert ok
