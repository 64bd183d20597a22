"""Bitrate controllers: constant bitrate, the delay-driven Adaptive replica and NeSt-VR.

Every controller consumes the same feeds (frame departures, per-frame
metrics delivered with the stats feedback, VF-RTT samples) and is stepped
once per adjustment period, returning a :class:`Decision`.
"""

from __future__ import annotations

import random
from dataclasses import asdict, dataclass

from .averaging import Averager, AveragerConfig

MBPS = 1e6


@dataclass(frozen=True)
class BitrateLadder:
    b_min: float
    b_max: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        if not 0 < self.b_min <= self.b_max:
            raise ValueError("need 0 < b_min <= b_max")

    @property
    def step(self) -> float:
        return (self.b_max - self.b_min) / self.n_steps

    @property
    def levels(self) -> tuple[float, ...]:
        return tuple(self.level(i) for i in range(self.n_steps + 1))

    def level(self, i: int) -> float:
        if i == self.n_steps:
            return self.b_max
        return self.b_min + i * self.step

    def floor_index(self, x: float) -> int:
        """Index of the greatest level <= max(x, b_min)."""
        x = max(x, self.b_min)
        best = 0
        for i in range(self.n_steps + 1):
            if self.level(i) <= x:
                best = i
        return best

    def floor(self, x: float) -> float:
        return self.level(self.floor_index(x))

    def index_of(self, bitrate: float) -> int:
        for i in range(self.n_steps + 1):
            if self.level(i) == bitrate:
                return i
        raise ValueError(f"{bitrate} is not a ladder level")


def ladder_floor(ladder: BitrateLadder, x: float) -> float:
    return ladder.floor(x)


@dataclass
class Decision:
    k: int
    time_s: float
    nfr_avg: float | None
    vfrtt_avg: float | None
    capacity_est: float | None
    branch: str
    bitrate: float
    rule_bitrate: float | None = None
    undefined: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


class Controller:
    """Shared feed bookkeeping; subclasses implement :meth:`_decide`."""

    kind = "base"
    period_s = 1.0

    def __init__(self, bitrate: float, averaging: AveragerConfig | None = None):
        averaging = averaging or AveragerConfig.window_by_time(1.0)
        self.averaging = averaging
        self.bitrate = bitrate
        self.k = 0
        self.decisions: list[Decision] = []
        self._rx = Averager(averaging)
        self._tx = Averager(averaging)
        self._rtt = Averager(averaging)
        self._peak = Averager(averaging)

    def observe_departure(self, time_s: float, gap_s: float) -> None:
        """Inter-departure gap between consecutive transmitted frames."""
        self._tx.push(gap_s, time_s)

    def observe_frame(self, time_s: float, *, interarrival_s: float | None = None,
                      peak_bps: float | None = None, vf_rtt_s: float | None = None,
                      payload_bits: int | None = None, network_delay_s: float | None = None) -> None:
        """Per-frame client metrics, delivered with the stats feedback at server time ``time_s``."""
        if interarrival_s is not None:
            self._rx.push(interarrival_s, time_s)
        if peak_bps is not None:
            self._peak.push(peak_bps, time_s)
        if vf_rtt_s is not None:
            self._rtt.push(vf_rtt_s, time_s)

    def observe_metrics(self, time_s: float, fm, network_delay_s: float | None = None) -> None:
        """Same as :meth:`observe_frame`, reading the values from a ``FrameMetrics``."""
        self.observe_frame(time_s, interarrival_s=fm.frame_interarrival_s, peak_bps=fm.peak_throughput_bps,
                           vf_rtt_s=fm.vf_rtt_s, payload_bits=fm.payload_bits,
                           network_delay_s=network_delay_s)

    def nfr(self, now_s: float | None = None) -> float | None:
        """Averaged delivery rate over averaged transmission rate.

        Rates are inverses of averaged gaps. With transmissions but no
        deliveries in scope the ratio is 0.
        """
        tx = self._tx.value(now_s)
        if tx is None:
            return None
        rx = self._rx.value(now_s)
        if rx is None:
            return 0.0
        return tx / rx

    def vf_rtt(self, now_s: float | None = None) -> float | None:
        return self._rtt.value(now_s)

    def estimate_capacity(self, now_s: float | None = None) -> float | None:
        return self._peak.value(now_s)

    def step(self, now_s: float) -> Decision:
        self.k += 1
        d = self._decide(now_s)
        self.bitrate = d.bitrate
        self.decisions.append(d)
        return d

    def _decide(self, now_s: float) -> Decision:
        raise NotImplementedError


class CbrController(Controller):
    kind = "cbr"

    def __init__(self, bitrate: float = 100 * MBPS, averaging: AveragerConfig | None = None):
        super().__init__(bitrate, averaging)

    def _decide(self, now_s: float) -> Decision:
        return Decision(self.k, now_s, self.nfr(now_s), self.vf_rtt(now_s),
                        self.estimate_capacity(now_s), "hold", self.bitrate)


def cbr_step(controller: CbrController) -> float:
    return controller.bitrate


PROFILES = ("balanced", "speedy", "anxious")


@dataclass
class NestVrConfig:
    tau: float = 1.0
    m: float = 0.9
    rho: float = 0.99
    sigma: float = 0.022
    gamma_plus: float = 0.25
    gamma_rtt: float = 1.0
    n_up: int = 1
    n_dw: int = 1
    b_min: float = 10 * MBPS
    b_max: float = 100 * MBPS
    n_steps: int = 9
    b_init: float = 100 * MBPS
    averaging: AveragerConfig | None = None
    seed: int = 0
    clamp_as_upper_bound: bool = True
    profile: str = "balanced"

    def __post_init__(self):
        if self.averaging is None:
            self.averaging = AveragerConfig.window_by_time(self.tau)
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.m <= 1:
            raise ValueError("m must be in (0, 1]")
        if not 0 <= self.rho <= 1:
            raise ValueError("rho must be in [0, 1]")
        for name in ("gamma_plus", "gamma_rtt"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in [0, 1]")
        for name in ("n_up", "n_dw"):
            if not 1 <= getattr(self, name) <= self.n_steps:
                raise ValueError(f"{name} must be in [1, n_steps]")

    @property
    def ladder(self) -> BitrateLadder:
        return BitrateLadder(self.b_min, self.b_max, self.n_steps)

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> NestVrConfig:
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")
        n_steps = overrides.get("n_steps", cls.n_steps)
        n_up = overrides.get("n_up", cls.n_up)
        n_dw = {"balanced": n_up, "speedy": min(2 * n_up, n_steps), "anxious": n_steps}[profile]
        overrides = {k: v for k, v in overrides.items() if k != "n_dw"}
        return cls(n_dw=n_dw, profile=profile, **overrides)


class NestVrController(Controller):
    kind = "nestvr"

    def __init__(self, config: NestVrConfig | None = None):
        self.config = config or NestVrConfig()
        self.ladder = self.config.ladder
        self.index = self.ladder.floor_index(max(self.config.b_init, self.config.b_min))
        super().__init__(self.ladder.level(self.index), self.config.averaging)
        self.period_s = self.config.tau
        self.rng = random.Random(self.config.seed)

    def _decide(self, now_s: float) -> Decision:
        cfg = self.config
        nfr = self.nfr(now_s)
        rtt = self.vf_rtt(now_s)
        cap = self.estimate_capacity(now_s)
        i, branch, undefined = nestvr_rule(self.index, nfr, rtt, cfg, self.rng)
        rule_bitrate = self.ladder.level(i)
        if cap is None:
            undefined = True
        else:
            ci = self.ladder.floor_index(max(cfg.m * cap, cfg.b_min))
            if cfg.clamp_as_upper_bound:
                if ci < i:
                    i, branch = ci, "clamped"
            elif ci != i:
                i, branch = ci, "clamped"
        self.index = i
        return Decision(self.k, now_s, nfr, rtt, cap, branch, self.ladder.level(i),
                        rule_bitrate=rule_bitrate, undefined=undefined)


def nestvr_rule(index: int, nfr: float | None, vf_rtt: float | None,
                cfg: NestVrConfig, rng: random.Random) -> tuple[int, str, bool]:
    """Hierarchical NFR / VF-RTT rule on ladder indices, before the capacity clamp.

    Returns ``(new_index, branch, undefined)``. Uniform draws happen only
    on the branch that needs them.
    """
    if nfr is None:
        return index, "hold", True
    if nfr < cfg.rho:
        return max(0, index - cfg.n_dw), "down_nfr", False
    if vf_rtt is None:
        return index, "hold", True
    if vf_rtt > cfg.sigma:
        if rng.random() <= cfg.gamma_rtt:
            return max(0, index - cfg.n_dw), "down_rtt", False
        return index, "hold", False
    if rng.random() <= cfg.gamma_plus:
        return min(cfg.n_steps, index + cfg.n_up), "up", False
    return index, "hold", False


def nestvr_step(controller: NestVrController, now_s: float) -> float:
    return controller.step(now_s).bitrate


@dataclass
class AdaptiveConfig:
    multiplier: float = 0.9
    fps_target: float = 90.0
    encoder_threshold: float | None = None
    decoder_threshold: float = 0.030
    network_threshold: float = 0.008
    b_min: float = 10 * MBPS
    b_max: float = 100 * MBPS
    b_init: float = 100 * MBPS
    window_s: float = 1.0
    window_mode: str = "time"
    period_s: float = 1.0
    encoder_latency_s: float = 0.0
    decoder_latency_s: float = 0.0

    def __post_init__(self):
        if self.encoder_threshold is None:
            self.encoder_threshold = 0.9 * (1.0 / self.fps_target)
        if not 0 < self.multiplier <= 1:
            raise ValueError("multiplier must be in (0, 1]")
        for name in ("encoder_threshold", "decoder_threshold", "network_threshold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.window_mode not in ("count", "time"):
            raise ValueError("window_mode must be 'count' or 'time'")


class AdaptiveController(Controller):
    """Delay-driven replica of ALVR's native adaptive bitrate.

    Capacity samples are frame payload over frame network delay; each
    latency whose average exceeds its threshold scales the target by
    ``threshold / observed``.
    """

    kind = "adaptive"

    def __init__(self, config: AdaptiveConfig | None = None, averaging: AveragerConfig | None = None):
        self.config = config or AdaptiveConfig()
        super().__init__(min(max(self.config.b_init, self.config.b_min), self.config.b_max), averaging)
        self.period_s = self.config.period_s
        cfg = self.config
        if cfg.window_mode == "count":
            window = AveragerConfig.window_by_count(max(1, round(cfg.window_s * cfg.fps_target)))
        else:
            window = AveragerConfig.window_by_time(cfg.window_s)
        self._capacity = Averager(window)
        self._net_delay = Averager(window)

    def observe_frame(self, time_s: float, *, interarrival_s: float | None = None,
                      peak_bps: float | None = None, vf_rtt_s: float | None = None,
                      payload_bits: int | None = None, network_delay_s: float | None = None) -> None:
        super().observe_frame(time_s, interarrival_s=interarrival_s, peak_bps=peak_bps, vf_rtt_s=vf_rtt_s)
        if payload_bits is not None and network_delay_s is not None and network_delay_s > 0:
            self._capacity.push(payload_bits / network_delay_s, time_s)
            self._net_delay.push(network_delay_s, time_s)

    def alvr_capacity(self, now_s: float | None = None) -> float | None:
        return self._capacity.value(now_s)

    def _decide(self, now_s: float) -> Decision:
        cfg = self.config
        cap = self._capacity.value(now_s)
        delay = self._net_delay.value(now_s)
        nfr, rtt = self.nfr(now_s), self.vf_rtt(now_s)
        if cap is None:
            return Decision(self.k, now_s, nfr, rtt, None, "hold", self.bitrate, undefined=True)
        target = adaptive_target(cap, delay, cfg)
        rule = target
        target = min(max(target, cfg.b_min), cfg.b_max)
        branch = "clamped" if target != rule else ("hold" if target == self.bitrate else "adjust")
        return Decision(self.k, now_s, nfr, rtt, cap, branch, target, rule_bitrate=rule)


def adaptive_target(capacity_avg: float, network_delay_avg: float | None, cfg: AdaptiveConfig) -> float:
    """Unclamped Adaptive target from averaged capacity and latencies."""
    target = cfg.multiplier * capacity_avg
    for observed, threshold in ((cfg.encoder_latency_s, cfg.encoder_threshold),
                                (cfg.decoder_latency_s, cfg.decoder_threshold),
                                (network_delay_avg, cfg.network_threshold)):
        if observed is not None and observed > threshold:
            target *= threshold / observed
    return target


def adaptive_step(controller: AdaptiveController, now_s: float) -> float:
    return controller.step(now_s).bitrate


def make_controller(spec: dict, *, seed: int = 0, fps: float = 90.0) -> Controller:
    """Build a controller from a manifest ``controller`` block."""
    kind = spec.get("type", "nestvr")
    params = dict(spec.get("params", {}))
    averaging = params.pop("averaging", None)
    averaging = AveragerConfig.from_dict(averaging) if averaging else None
    if kind == "cbr":
        return CbrController(params.get("bitrate", 100 * MBPS), averaging)
    if kind == "adaptive":
        params.setdefault("fps_target", fps)
        return AdaptiveController(AdaptiveConfig(**params), averaging)
    if kind == "nestvr":
        params.setdefault("seed", seed)
        if averaging is not None:
            params["averaging"] = averaging
        return NestVrController(NestVrConfig.for_profile(spec.get("profile", "balanced"), **params))
    raise ValueError(f"unknown controller type {kind!r}")
