"""Trajectory records: the persisted audit trail of states, actions, findings,
interventions, and the final answer.

The source of truth is a line-delimited JSON event log (kinds: session_start,
state, action, intervention, final, error). The typed aggregate is derived
from the events, so persist/load round-trips are lossless by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .executor import (
    FinalAnswer,
    MissingInfoDirective,
    PredictedAnswer,
    SufficiencyVerdict,
)
from .perceptor import DESCRIPTION_UNAVAILABLE
from .slides import Patch

ACTION_EXPLORE = "Explore"
ACTION_ZOOM = "Zoom"
ACTION_CONCLUDE = "Conclude"
ACTION_FORCED_CONCLUDE = "ForcedConclude"
TERMINAL_ACTIONS = (ACTION_ZOOM, ACTION_CONCLUDE, ACTION_FORCED_CONCLUDE)

EVENT_KINDS = ("session_start", "state", "action", "intervention", "final", "error")

INTERVENTION_KINDS = (
    "select_rois",
    "edit_description",
    "inject_note",
    "set_magnification",
    "finalize",
)

STATUS_RUNNING = "running"
STATUS_PAUSED = "paused"
STATUS_AWAITING = "awaiting_intervention"
STATUS_DONE = "done"
STATUS_FAILED = "failed"


class TrajectoryError(Exception):
    pass


class TrajectoryLoadError(TrajectoryError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class StateEntry:
    """One piece of evidence: a described patch at a magnification and location."""

    magnification: int
    col: int
    row: int
    patch_index: int
    text: str
    prompt_kind: str
    question: str | None = None

    @property
    def available(self) -> bool:
        return self.text != DESCRIPTION_UNAVAILABLE


@dataclass
class AnalyticState:
    iteration: int
    magnification: int  # base sampling magnification of this iteration
    entries: list[StateEntry]
    relevance_order: list[int]


@dataclass
class ActionRecord:
    iteration: int
    action: str
    predicted: PredictedAnswer
    verdict: SufficiencyVerdict
    directive: MissingInfoDirective | None = None
    warnings: tuple[str, ...] = ()
    prompt_preview: str = ""


@dataclass
class TrajectoryStep:
    state: AnalyticState
    findings: list[Patch]
    action: ActionRecord | None = None


@dataclass
class InterventionRecord:
    at_iteration: int
    kind: str
    payload: dict
    author: str = "human"
    timestamp: str = ""


@dataclass
class Trajectory:
    """Typed view over an event log; equality of events implies equality here."""

    session_id: str
    slide_id: str
    question: str
    options: tuple[str, ...]
    config: dict
    events: list[dict]
    steps: list[TrajectoryStep] = field(default_factory=list)
    interventions: list[InterventionRecord] = field(default_factory=list)
    final: FinalAnswer | None = None
    status: str = STATUS_RUNNING
    created_at: str = ""
    finished_at: str | None = None
    error: str | None = None

    @property
    def iterations_used(self) -> int:
        return max((s.state.iteration for s in self.steps), default=0)

    @property
    def actions(self) -> list[str]:
        return [s.action.action for s in self.steps if s.action is not None]


# ---------------------------------------------------------------------------
# Serialization helpers
# ---------------------------------------------------------------------------

def json_line(event: dict) -> str:
    return json.dumps(event, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def patch_to_dict(patch: Patch) -> dict:
    return {"magnification": patch.magnification, "col": patch.col,
            "row": patch.row, "patch_index": patch.patch_index}


def patch_from_dict(data: dict, slide_id: str) -> Patch:
    return Patch(slide_id, int(data["magnification"]), int(data["col"]),
                 int(data["row"]), int(data["patch_index"]))


def entry_to_dict(entry: StateEntry) -> dict:
    return {
        "magnification": entry.magnification, "col": entry.col, "row": entry.row,
        "patch_index": entry.patch_index, "text": entry.text,
        "prompt_kind": entry.prompt_kind, "question": entry.question,
    }


def entry_from_dict(data: dict) -> StateEntry:
    return StateEntry(
        int(data["magnification"]), int(data["col"]), int(data["row"]),
        int(data["patch_index"]), data["text"], data["prompt_kind"],
        data.get("question"),
    )


def directive_to_dict(directive: MissingInfoDirective | None) -> dict | None:
    if directive is None:
        return None
    return {
        "missing_info": directive.missing_info,
        "zoom_recommendation": directive.zoom_recommendation,
        "recommended_zoom_level": directive.recommended_zoom_level,
        "zoom_reason": directive.zoom_reason,
        "warnings": list(directive.warnings),
    }


def directive_from_dict(data: dict | None) -> MissingInfoDirective | None:
    if data is None:
        return None
    return MissingInfoDirective(
        data["missing_info"], bool(data["zoom_recommendation"]),
        data.get("recommended_zoom_level"), data.get("zoom_reason", ""),
        tuple(data.get("warnings", [])),
    )


def state_event(seq: int, state: AnalyticState, findings: list[Patch]) -> dict:
    return {
        "event": "state", "seq": seq, "iteration": state.iteration,
        "magnification": state.magnification,
        "entries": [entry_to_dict(e) for e in state.entries],
        "relevance_order": list(state.relevance_order),
        "findings": [patch_to_dict(p) for p in findings],
    }


def action_event(seq: int, record: ActionRecord) -> dict:
    return {
        "event": "action", "seq": seq, "iteration": record.iteration,
        "action": record.action,
        "predicted": {"answer": record.predicted.answer,
                      "thinking_steps": record.predicted.thinking_steps},
        "verdict": {"sufficient": record.verdict.sufficient},
        "directive": directive_to_dict(record.directive),
        "warnings": list(record.warnings),
        "prompt_preview": record.prompt_preview,
    }


def _action_from_event(ev: dict) -> ActionRecord:
    return ActionRecord(
        iteration=int(ev["iteration"]),
        action=ev["action"],
        predicted=PredictedAnswer(ev["predicted"]["answer"], ev["predicted"]["thinking_steps"]),
        verdict=SufficiencyVerdict(bool(ev["verdict"]["sufficient"])),
        directive=directive_from_dict(ev.get("directive")),
        warnings=tuple(ev.get("warnings", [])),
        prompt_preview=ev.get("prompt_preview", ""),
    )


def trajectory_from_events(events: list[dict]) -> Trajectory:
    """Rebuild the typed trajectory. Later state events for an iteration replace
    earlier ones (a zoom appends evidence to the iteration it happened in)."""
    if not events or events[0].get("event") != "session_start":
        raise TrajectoryLoadError("no session header", line=1)
    header = events[0]
    trajectory = Trajectory(
        session_id=header.get("session_id", ""),
        slide_id=header.get("slide_id", ""),
        question=header.get("question", ""),
        options=tuple(header.get("options") or ()),
        config=dict(header.get("config") or {}),
        events=events,
        created_at=header.get("created_at", ""),
    )
    steps: dict[int, TrajectoryStep] = {}
    for ev in events[1:]:
        kind = ev.get("event")
        if kind == "state":
            state = AnalyticState(
                iteration=int(ev["iteration"]),
                magnification=int(ev["magnification"]),
                entries=[entry_from_dict(e) for e in ev.get("entries", [])],
                relevance_order=[int(i) for i in ev.get("relevance_order", [])],
            )
            findings = [patch_from_dict(p, trajectory.slide_id) for p in ev.get("findings", [])]
            if state.iteration in steps:
                steps[state.iteration].state = state
                steps[state.iteration].findings = findings
            else:
                steps[state.iteration] = TrajectoryStep(state, findings)
        elif kind == "action":
            record = _action_from_event(ev)
            if record.iteration in steps:
                steps[record.iteration].action = record
            else:  # defensive: action without a described state
                steps[record.iteration] = TrajectoryStep(
                    AnalyticState(record.iteration, 0, [], []), [], record)
        elif kind == "intervention":
            trajectory.interventions.append(InterventionRecord(
                at_iteration=int(ev["at_iteration"]), kind=ev["kind"],
                payload=dict(ev.get("payload") or {}),
                author=ev.get("author", "human"), timestamp=ev.get("timestamp", ""),
            ))
        elif kind == "final":
            trajectory.final = FinalAnswer(ev["answer"], ev["reasoning_chain"],
                                           int(ev["iterations_used"]))
            trajectory.status = STATUS_DONE
            trajectory.finished_at = ev.get("finished_at")
        elif kind == "error":
            trajectory.status = STATUS_FAILED
            trajectory.error = ev.get("message", "")
            trajectory.finished_at = ev.get("finished_at")
        elif kind != "session_start":
            raise TrajectoryLoadError(f"unknown event kind {kind!r}")
    trajectory.steps = [steps[i] for i in sorted(steps)]
    return trajectory


def persist_trajectory(trajectory: Trajectory, path: str | Path) -> Path:
    """Write the event log as line-delimited JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for event in trajectory.events:
            fh.write(json_line(event) + "\n")
    return path


def load_trajectory(path: str | Path) -> Trajectory:
    """Load an event log; a corrupt line fails with its line number."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise TrajectoryLoadError(f"cannot read {path}: {exc}") from exc
    events: list[dict] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            event = json.loads(line)
        except json.JSONDecodeError as exc:
            raise TrajectoryLoadError(f"corrupt event at line {lineno}: {exc.msg}",
                                      line=lineno) from exc
        if not isinstance(event, dict):
            raise TrajectoryLoadError(f"corrupt event at line {lineno}: not an object",
                                      line=lineno)
        events.append(event)
    if not events:
        raise TrajectoryLoadError("no session header", line=1)
    return trajectory_from_events(events)
