"""Compiled vs pure-Python kernels on identical inputs.

    python benchmarks/bench_kernels.py [--packets N]

Each kernel runs once to warm up (compilation), then is timed on the same
arrays in both forms; outputs are checked for equality. With
NESTSIM_DISABLE_JIT=1 both columns time the Python code.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from nestsim import _kernels as K
from nestsim.metrics import KALMAN_INITIAL_ERROR, KALMAN_INITIAL_NOISE, KALMAN_NOISE_FLOOR
from nestsim.metrics import KALMAN_NOISE_SMOOTHING, KALMAN_STATE_NOISE
from nestsim.netem import Link, LinkScenario, Phase
from nestsim.traffic import TrafficConfig, burst_arrays, frame_payload_bits


def make_stream(n_frames: int, seed: int = 0):
    """A 100 Mbps burst stream through a lossy, jittery 95 Mbps bottleneck, sorted by arrival."""
    rng = np.random.default_rng(seed)
    traffic = TrafficConfig()
    frames = np.arange(1, n_frames + 1, dtype=np.int64)
    deps = traffic.frame_departure_ns(frames - 1)
    pos, _, npk, pay = burst_arrays(frame_payload_bits(traffic, 100e6, frames), traffic.max_packet_payload_bits)
    bits = pay + traffic.overhead_bits
    seq = np.arange(1, len(pos) + 1, dtype=np.int64)
    scenario = LinkScenario((Phase(0, 1e6, 95e6, loss_prob=0.01, jitter_max_s=0.002, dup_prob=0.01),))
    link = Link(scenario, seed=rng)
    link.offer(0, seq, deps[pos], bits)
    r = link.drain_all()
    order = np.lexsort((r.duplicate, r.seq, r.arrival_ns))
    s = r.seq[order]
    row = s - 1
    return dict(seq=s, frame=frames[pos][row], npk=npk[row], bits=bits[row], dep=deps[pos][row],
                arr=r.arrival_ns[order], offered=(deps[pos], bits))


def run_fifo(kernel, stream):
    ingress, bits = stream["offered"]
    n = len(ingress)
    out = [np.empty(n, np.int64), np.empty(n, np.int64), np.empty(n, np.bool_)]
    kernel(ingress, bits, np.full(n, 95e6), np.full(n, 300 * 11568, np.int64), np.zeros(1, np.int64), *out)
    return out


def run_assemble(kernel, stream):
    n = len(stream["seq"])
    nf = int(stream["frame"].max()) + 1
    st = np.zeros(K.ST_SIZE, np.int64)
    st[K.ST_LAST_COMPLETED] = -1
    outs = [np.empty(n, np.int64) for _ in range(10)] + [np.empty(n)]
    m = kernel(stream["seq"], stream["frame"], stream["npk"], stream["bits"], stream["dep"], stream["arr"],
               50_000_000, st, np.zeros(1), np.zeros(int(stream["seq"].max()) + 1, np.uint8),
               np.zeros(nf, np.int8), np.zeros(nf, np.int64), np.zeros(nf, np.int64), np.zeros(nf, np.int64),
               np.zeros(nf, np.int64), np.zeros(nf, np.int64), *outs)
    return [o[:m] for o in outs]


def run_derive(kernel, rows):
    m = len(rows[0])
    out = [np.empty(m, np.int64), np.empty(m, np.int64), np.empty(m), np.empty(m, np.int64),
           np.empty(m, np.int64), np.empty(m), np.empty(m, np.bool_), np.empty(m), np.empty(m),
           np.empty(m, np.int64), np.empty(m)]
    kernel(rows[0], rows[1], rows[2], rows[3], rows[4], rows[6], rows[7], rows[8], rows[9],
           np.zeros(K.DS_SIZE, np.int64), np.zeros(16, np.int64),
           np.array([0.0, KALMAN_INITIAL_ERROR, KALMAN_INITIAL_NOISE]),
           KALMAN_STATE_NOISE, KALMAN_NOISE_SMOOTHING, KALMAN_NOISE_FLOOR, *out)
    return out


def timed(fn, *args, repeat: int = 3):
    best = float("inf")
    result = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, result


def same(a, b) -> bool:
    return all(np.array_equal(x, y, equal_nan=x.dtype.kind == "f") for x, y in zip(a, b))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--frames", type=int, default=2000, help="frames in the test stream (100 packets each)")
    args = parser.parse_args(argv)
    stream = make_stream(args.frames)
    print(f"jit enabled: {K.JIT_ENABLED}; {len(stream['seq'])} packets, {args.frames} frames")

    rows = run_assemble(K.assemble, stream)  # warm up and provide derive's input
    cases = [
        ("fifo_drain", run_fifo, K.fifo_drain, stream),
        ("assemble", run_assemble, K.assemble, stream),
        ("derive", run_derive, K.derive, rows),
    ]
    print(f"{'kernel':12s} {'compiled (ms)':>14s} {'python (ms)':>12s} {'speedup':>8s}  equal")
    for name, runner, kernel, data in cases:
        runner(kernel, data)
        t_jit, out_jit = timed(runner, kernel, data)
        t_py, out_py = timed(runner, K.python_impl(kernel), data, repeat=1)
        print(f"{name:12s} {t_jit * 1e3:14.2f} {t_py * 1e3:12.2f} {t_py / t_jit:7.1f}x  {same(out_jit, out_py)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
