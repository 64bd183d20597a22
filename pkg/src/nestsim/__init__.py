"""Simulator, network metrics and bitrate controllers for ALVR-style VR streaming."""

from .abr import (
    AdaptiveConfig,
    AdaptiveController,
    BitrateLadder,
    CbrController,
    Decision,
    NestVrConfig,
    NestVrController,
    ladder_floor,
    make_controller,
)
from .averaging import Averager, AveragerConfig
from .metrics import FrameMetrics, MetricsEngine
from .model import Clocks, FrameAssembly, PacketRecord, StatsFeedback, fragment_frame
from .netem import DropLedger, Link, LinkScenario, Phase
from .sim import Session, SessionResult, run_multi_session, run_session
from .traffic import TrafficConfig

__version__ = "0.1.0"

__all__ = [
    "AdaptiveConfig",
    "AdaptiveController",
    "Averager",
    "AveragerConfig",
    "BitrateLadder",
    "CbrController",
    "Clocks",
    "Decision",
    "DropLedger",
    "FrameAssembly",
    "FrameMetrics",
    "Link",
    "LinkScenario",
    "MetricsEngine",
    "NestVrConfig",
    "NestVrController",
    "PacketRecord",
    "Phase",
    "Session",
    "SessionResult",
    "StatsFeedback",
    "TrafficConfig",
    "fragment_frame",
    "ladder_floor",
    "make_controller",
    "run_multi_session",
    "run_session",
]
