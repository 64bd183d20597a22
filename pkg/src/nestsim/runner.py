"""Run manifests: load and validate, simulate, write the result files."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

from .abr import make_controller
from .metrics import DEFAULT_DEADLINE_S, DEFAULT_JITTER_WINDOW
from .netem import LinkScenario
from .sim import Session, SessionResult, run_multi_session
from .traceio import (
    MANIFEST_SCHEMA,
    SCENARIO_SCHEMA,
    SchemaError,
    feedback_from_engine,
    make_run_id,
    metric_log_from_engine,
    output_dir,
    read_json,
    summarize_logs,
    trace_from_result,
    validate_document,
    write_decisions,
    write_feedback,
    write_json,
    write_metrics,
    write_trace,
)
from .traffic import TrafficConfig

RESULT_FILES = ("trace.csv", "feedback.csv", "metrics.jsonl", "decisions.jsonl", "summary.json")


def load_manifest(path) -> dict:
    """Validated manifest with the scenario inlined (a path is resolved against the manifest's folder)."""
    path = Path(path)
    doc = read_json(path)
    validate_document(doc, MANIFEST_SCHEMA, str(path))
    doc = copy.deepcopy(doc)
    scenario = doc["scenario"]
    if isinstance(scenario, str):
        scenario_path = (path.parent / scenario).resolve()
        if not scenario_path.exists():
            raise SchemaError(f"{path}: field 'scenario': file not found: {scenario_path}")
        scenario = read_json(scenario_path)
        validate_document(scenario, SCENARIO_SCHEMA, str(scenario_path))
    else:
        validate_document(scenario, SCENARIO_SCHEMA, f"{path} (scenario)")
    doc["scenario"] = scenario
    doc.setdefault("name", path.stem)
    return doc


def _session_specs(manifest: dict) -> list[dict]:
    if "sessions" in manifest:
        specs = manifest["sessions"]
    else:
        specs = [{"controller": manifest["controller"], "traffic": manifest.get("traffic", {}),
                  "client_offset_ns": manifest.get("client_offset_ns", 0), "name": "video"}]
    out = []
    for i, spec in enumerate(specs):
        spec = dict(spec)
        spec.setdefault("traffic", manifest.get("traffic", {}))
        spec.setdefault("name", f"session{i}")
        out.append(spec)
    return out


def build_sessions(manifest: dict) -> tuple[list[Session], LinkScenario]:
    try:
        scenario = LinkScenario.from_dict(manifest["scenario"])
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"scenario: {exc}") from exc
    seed = manifest.get("seed", 0)
    sessions = []
    for i, spec in enumerate(_session_specs(manifest)):
        where = f"sessions.{i}" if "sessions" in manifest else "controller"
        try:
            traffic = TrafficConfig.from_dict(spec["traffic"])
            controller = make_controller(spec["controller"], seed=seed + i, fps=traffic.fps)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"field '{where}': {exc}") from exc
        sessions.append(Session(controller, traffic, spec.get("client_offset_ns", 0),
                                spec.get("start_s", 0.0), spec["name"]))
    return sessions, scenario


@dataclass
class RunOutput:
    directory: Path
    session_dirs: list[Path]
    results: list[SessionResult]
    summaries: list[dict]


def execute(manifest: dict, out_root=None) -> RunOutput:
    """Simulate a loaded manifest and write one result folder per session."""
    sessions, scenario = build_sessions(manifest)
    results = run_multi_session(sessions, scenario, manifest["duration_s"], manifest.get("seed", 0),
                                deadline_s=manifest.get("deadline_s", DEFAULT_DEADLINE_S),
                                jitter_window=manifest.get("jitter_window", DEFAULT_JITTER_WINDOW))
    root = Path(out_root) if out_root is not None else output_dir()
    directory = root / manifest["name"]
    directory.mkdir(parents=True, exist_ok=True)
    write_json(manifest, directory / "manifest.json")
    intervals = [tuple(iv) for iv in manifest.get("intervals", [[0.0, manifest["duration_s"]]])]
    single = len(results) == 1
    dirs, summaries = [], []
    for i, (res, session) in enumerate(zip(results, sessions)):
        d = directory if single else directory / res.name
        d.mkdir(parents=True, exist_ok=True)
        summaries.append(write_session(res, d, make_run_id(manifest, i), session.controller.kind,
                                       intervals, manifest.get("write_trace", True)))
        dirs.append(d)
    return RunOutput(directory, dirs, results, summaries)


def write_session(res: SessionResult, directory: Path, run_id: str, controller: str, intervals,
                  with_trace: bool = True) -> dict:
    log = metric_log_from_engine(res.engine, run_id, res.client_offset_ns)
    if with_trace:
        write_trace(trace_from_result(res, run_id), directory / "trace.csv")
    write_feedback(feedback_from_engine(res.engine, run_id), directory / "feedback.csv")
    write_metrics(log, directory / "metrics.jsonl")
    write_decisions(res.decisions, directory / "decisions.jsonl", run_id, controller)
    summary = {
        "run_id": run_id,
        "session": res.name,
        "controller": controller,
        "seed": res.seed,
        "duration_s": res.duration_s,
        "intervals": summarize_logs(log, [d.to_dict() for d in res.decisions], intervals),
        "frames": {"completed": len(log), "abandoned": len(log.abandoned),
                   "duplicates_discarded": res.engine.duplicates},
        "ledger": res.ledger.counts(),
    }
    write_json(summary, directory / "summary.json")
    return summary


def run_manifest(path, out_root=None) -> RunOutput:
    return execute(load_manifest(path), out_root)
