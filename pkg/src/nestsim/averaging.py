"""Sliding-window and EWMA averagers used by the bitrate controllers."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass


@dataclass(frozen=True)
class AveragerConfig:
    """One of ``count`` (last ``n`` samples), ``time`` (samples younger than ``t``) or ``ewma``."""

    mode: str = "time"
    n: int | None = None
    t: float | None = 1.0
    omega: float | None = None

    def __post_init__(self):
        if self.mode == "count":
            if self.n is None or self.n < 1:
                raise ValueError("count window needs n >= 1")
        elif self.mode == "time":
            if self.t is None or self.t <= 0:
                raise ValueError("time window needs t > 0")
        elif self.mode == "ewma":
            if self.omega is None or not 0 < self.omega <= 1:
                raise ValueError("ewma needs 0 < omega <= 1")
        else:
            raise ValueError(f"unknown averaging mode {self.mode!r}")

    @classmethod
    def window_by_count(cls, n: int) -> AveragerConfig:
        return cls(mode="count", n=n, t=None)

    @classmethod
    def window_by_time(cls, t: float) -> AveragerConfig:
        return cls(mode="time", t=t)

    @classmethod
    def ewma(cls, omega: float) -> AveragerConfig:
        return cls(mode="ewma", t=None, omega=omega)

    @classmethod
    def from_dict(cls, d: dict) -> AveragerConfig:
        return cls(mode=d.get("mode", "time"), n=d.get("n"),
                   t=d.get("t", 1.0 if d.get("mode", "time") == "time" else None),
                   omega=d.get("omega"))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "n": self.n, "t": self.t, "omega": self.omega}


class Averager:
    """Running average of a timestamped stream.

    Timestamps are seconds and must be non-decreasing. The time window keeps
    a sample while ``now - timestamp < t``, where ``now`` is the newest push
    (or the time passed to :meth:`value`).
    """

    def __init__(self, config: AveragerConfig):
        self.config = config
        self._ewma: float | None = None
        self._samples: deque = deque(maxlen=config.n if config.mode == "count" else None)

    def push(self, value: float, timestamp: float = 0.0) -> None:
        mode = self.config.mode
        if mode == "ewma":
            w = self.config.omega
            self._ewma = value if self._ewma is None else w * value + (1.0 - w) * self._ewma
        elif mode == "count":
            self._samples.append(value)
        else:
            self._samples.append((timestamp, value))
            self._evict(timestamp)

    def _evict(self, now: float) -> None:
        samples = self._samples
        t = self.config.t
        while samples and now - samples[0][0] >= t:
            samples.popleft()

    def value(self, now: float | None = None) -> float | None:
        """Current average, or ``None`` when nothing qualifies."""
        mode = self.config.mode
        if mode == "ewma":
            return self._ewma
        if mode == "count":
            return sum(self._samples) / len(self._samples) if self._samples else None
        if now is not None:
            self._evict(now)
        if not self._samples:
            return None
        return sum(v for _, v in self._samples) / len(self._samples)

    def retained(self) -> list[float]:
        if self.config.mode == "ewma":
            return [] if self._ewma is None else [self._ewma]
        if self.config.mode == "count":
            return list(self._samples)
        return [v for _, v in self._samples]

    def __len__(self) -> int:
        if self.config.mode == "ewma":
            return 0 if self._ewma is None else 1
        return len(self._samples)
