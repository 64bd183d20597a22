"""Hot sequential loops, compiled with numba when available.

Setting ``NESTSIM_DISABLE_JIT=1`` before import keeps every kernel as plain
Python (same code, same results up to float rounding of very large
integers). :func:`python_impl` returns the uncompiled version of a kernel
either way, which is what the benchmarks compare against.
"""

from __future__ import annotations

import math
import os

import numpy as np

JIT_ENABLED = os.environ.get("NESTSIM_DISABLE_JIT", "").strip().lower() not in ("1", "true", "yes", "on")

if JIT_ENABLED:
    from numba import njit
else:
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def python_impl(kernel):
    return getattr(kernel, "py_func", kernel)


# assemble() scalar state slots
ST_HSEQ = 0
ST_HSEQ_PREV = 1
ST_INTERVAL_PACKETS = 2
ST_INTERVAL_BITS = 3
ST_LAST_COMPLETED = 4
ST_RECEIVED = 5
ST_DUPLICATES = 6
ST_HAVE_LAST = 7
ST_LAST_ARRIVAL = 8
ST_LAST_DEPARTURE = 9
ST_SIZE = 10

# frame status codes
F_NONE = 0
F_IN_PROGRESS = 1
F_COMPLETE = 2
F_ABANDONED = 3


@njit(cache=True)
def fifo_drain(ingress, bits, capacity_bps, limit_bits, state, start, done, admitted):
    """Drop-tail FIFO served at a per-packet capacity.

    ``ingress`` must be sorted. ``state[0]`` is the time the server becomes
    idle and is updated in place. The backlog seen by an arriving packet is
    the remaining busy time expressed in bits at that packet's capacity; a
    negative limit means unbounded. Infinite capacity serves instantly.
    """
    busy = state[0]
    for i in range(ingress.shape[0]):
        t = ingress[i]
        cap = capacity_bps[i]
        s = busy if busy > t else t
        if cap == np.inf:
            start[i] = s
            done[i] = s
            admitted[i] = True
            continue
        if limit_bits[i] >= 0:
            backlog = 0.0
            if busy > t:
                backlog = (busy - t) * cap / 1e9
            if backlog + bits[i] > limit_bits[i]:
                admitted[i] = False
                start[i] = -1
                done[i] = -1
                continue
        ser = np.int64(math.floor(bits[i] * 1e9 / cap + 0.5))
        start[i] = s
        done[i] = s + ser
        busy = s + ser
        admitted[i] = True
    state[0] = busy


@njit(cache=True)
def assemble(seq, frame, n_packets, bits, departure, arrival, deadline_ns,
             st, jitter, seen, fstatus, freceived, fnpk, ffirst, fdep, fbits,
             out_frame, out_first, out_completion, out_dep, out_bits, out_npk,
             out_hseq, out_hseq_prev, out_ipk, out_ibits, out_pj):
    """Frame assembly, RFC 3550 jitter and sequence accounting over sorted arrivals.

    Writes one row per completely and timely received frame into the
    ``out_*`` arrays and returns the number of rows. All state lives in the
    passed arrays so consecutive batches continue seamlessly.
    """
    m = 0
    hseq = st[ST_HSEQ]
    ipk = st[ST_INTERVAL_PACKETS]
    ibits = st[ST_INTERVAL_BITS]
    last_completed = st[ST_LAST_COMPLETED]
    have_last = st[ST_HAVE_LAST]
    last_arr = st[ST_LAST_ARRIVAL]
    last_dep = st[ST_LAST_DEPARTURE]
    j = jitter[0]
    for i in range(seq.shape[0]):
        s = seq[i]
        if seen[s]:
            st[ST_DUPLICATES] += 1
            continue
        seen[s] = 1
        st[ST_RECEIVED] += 1
        a = arrival[i]
        dp = departure[i]
        if have_last:
            d = (a - last_arr) - (dp - last_dep)
            if d < 0:
                d = -d
            j += (d - j) / 16.0
        have_last = 1
        last_arr = a
        last_dep = dp
        if s > hseq:
            hseq = s
        ipk += 1
        ibits += bits[i]

        f = frame[i]
        status = fstatus[f]
        if status == F_NONE:
            if f <= last_completed:
                fstatus[f] = F_ABANDONED
                continue
            fstatus[f] = F_IN_PROGRESS
            freceived[f] = 0
            fnpk[f] = n_packets[i]
            ffirst[f] = a
            fdep[f] = dp
            fbits[f] = 0
        elif status != F_IN_PROGRESS:
            continue
        freceived[f] += 1
        fbits[f] += bits[i]
        if freceived[f] < fnpk[f]:
            continue
        if f <= last_completed or a - ffirst[f] > deadline_ns:
            fstatus[f] = F_ABANDONED
            continue
        for g in range(last_completed + 1, f):
            if g >= 0 and fstatus[g] == F_IN_PROGRESS:
                fstatus[g] = F_ABANDONED
        fstatus[f] = F_COMPLETE
        out_frame[m] = f
        out_first[m] = ffirst[f]
        out_completion[m] = a
        out_dep[m] = fdep[f]
        out_bits[m] = fbits[f]
        out_npk[m] = fnpk[f]
        out_hseq[m] = hseq
        out_hseq_prev[m] = st[ST_HSEQ_PREV]
        out_ipk[m] = ipk
        out_ibits[m] = ibits
        out_pj[m] = j
        m += 1
        st[ST_HSEQ_PREV] = hseq
        ipk = 0
        ibits = 0
        last_completed = f
    st[ST_HSEQ] = hseq
    st[ST_INTERVAL_PACKETS] = ipk
    st[ST_INTERVAL_BITS] = ibits
    st[ST_LAST_COMPLETED] = last_completed
    st[ST_HAVE_LAST] = have_last
    st[ST_LAST_ARRIVAL] = last_arr
    st[ST_LAST_DEPARTURE] = last_dep
    jitter[0] = j
    return m


# derive() state slots
DS_HAVE_PREV = 0
DS_PREV_FRAME = 1
DS_PREV_COMPLETION = 2
DS_PREV_DEPARTURE = 3
DS_WINDOW_COUNT = 4
DS_WINDOW_POS = 5
DS_SIZE = 6


@njit(cache=True)
def window_std_ns(ring, c):
    """Sample std of the first ``c`` ring entries (integer ns).

    Exact integer moments about the minimum when they fit in int64,
    otherwise a two-pass float computation.
    """
    mn = ring[0]
    mx = ring[0]
    for k in range(1, c):
        if ring[k] < mn:
            mn = ring[k]
        if ring[k] > mx:
            mx = ring[k]
    if (mx - mn) * c <= 2147483648:
        sa = 0
        sq = 0
        for k in range(c):
            a = ring[k] - mn
            sa += a
            sq += a * a
        return math.sqrt((c * sq - sa * sa) / (c * (c - 1)))
    mean = 0.0
    for k in range(c):
        mean += ring[k]
    mean /= c
    ss = 0.0
    for k in range(c):
        dev = ring[k] - mean
        ss += dev * dev
    return math.sqrt(ss / (c - 1))


@njit(cache=True)
def derive(frame, first, completion, dep, bits, hseq, hseq_prev, ipk, ibits,
           ds, ring, kal, kalman_q, kalman_alpha, kalman_floor,
           prev_index, span_ns, peak, interarrival_ns, lost, plr, clamped,
           throughput, fj, owd_ns, fowd):
    """Per-frame metrics from completion rows; undefined floats are NaN."""
    w = ring.shape[0]
    for i in range(frame.shape[0]):
        span = completion[i] - first[i]
        span_ns[i] = span
        peak[i] = bits[i] / (span / 1e9) if span > 0 else np.nan
        interarrival_ns[i] = -1
        lost[i] = -1
        plr[i] = np.nan
        clamped[i] = False
        throughput[i] = np.nan
        fj[i] = np.nan
        owd_ns[i] = 0
        fowd[i] = np.nan
        prev_index[i] = -1
        if ds[DS_HAVE_PREV]:
            prev_index[i] = ds[DS_PREV_FRAME]
            gap = completion[i] - ds[DS_PREV_COMPLETION]
            interarrival_ns[i] = gap
            expected = hseq[i] - hseq_prev[i]
            lo = expected - ipk[i]
            if lo < 0:
                lo = 0
                clamped[i] = True
            lost[i] = lo
            plr[i] = lo / expected if expected > 0 else 0.0
            if gap > 0:
                throughput[i] = ibits[i] / (gap / 1e9)
            pos = ds[DS_WINDOW_POS]
            ring[pos] = gap
            ds[DS_WINDOW_POS] = (pos + 1) % w
            if ds[DS_WINDOW_COUNT] < w:
                ds[DS_WINDOW_COUNT] += 1
            c = ds[DS_WINDOW_COUNT]
            if c >= 2:
                fj[i] = window_std_ns(ring, c) / 1e9
            o = gap - (dep[i] - ds[DS_PREV_DEPARTURE])
            owd_ns[i] = o
            raw = o / 1e9
            innovation = raw - kal[0]
            noise = (1.0 - kalman_alpha) * kal[2] + kalman_alpha * innovation * innovation
            if noise < kalman_floor:
                noise = kalman_floor
            kal[2] = noise
            prior = kal[1] + kalman_q
            gain = prior / (prior + noise)
            kal[0] = kal[0] + gain * innovation
            kal[1] = (1.0 - gain) * prior
            fowd[i] = kal[0]
        ds[DS_HAVE_PREV] = 1
        ds[DS_PREV_FRAME] = frame[i]
        ds[DS_PREV_COMPLETION] = completion[i]
        ds[DS_PREV_DEPARTURE] = dep[i]
