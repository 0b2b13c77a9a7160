"""The iterative analysis loop: sample evidence, describe it, reason, and act.

Each iteration runs predict -> reflect, then either concludes (sufficient
evidence), zooms into the current findings at a higher magnification (one
more described patch, then conclude), or explores more unexamined patches
with the missing-information text as the retrieval query. The loop is a
resumable state machine with interactive checkpoints where a human can
replace RoIs, correct descriptions, inject notes, force a magnification,
or finalize.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

from . import executor, navigator, perceptor, records
from .backends import BackendError, Backends
from .executor import (
    DirectiveContractError,
    ExecutorError,
    FinalAnswer,
    MissingInfoDirective,
    StateRendering,
)
from .navigator import ExclusionSet, PatchEmbeddingIndex
from .perceptor import PerceptorError
from .records import (
    ACTION_CONCLUDE,
    ACTION_EXPLORE,
    ACTION_FORCED_CONCLUDE,
    ACTION_ZOOM,
    STATUS_AWAITING,
    STATUS_DONE,
    STATUS_FAILED,
    STATUS_PAUSED,
    STATUS_RUNNING,
    ActionRecord,
    AnalyticState,
    InterventionRecord,
    StateEntry,
    Trajectory,
    trajectory_from_events,
)
from .slides import BundleError, Patch, SlideBundle

CHECKPOINT_PRE_SAMPLING = "pre_sampling"
CHECKPOINT_POST_SAMPLING = "post_sampling"
CHECKPOINT_POST_REASONING = "post_reasoning"


class SessionError(Exception):
    pass


class SessionStateError(SessionError):
    """Operation requires a paused (or not-yet-terminal) session."""


class InterventionError(SessionError):
    """Intervention payload is invalid for the current checkpoint."""


class SessionAbortedError(SessionError):
    """A backend failure ended the session; the partial trajectory is persisted."""


@dataclass
class SessionConfig:
    max_iterations: int = 5
    initial_magnification: int = 5
    k1_fraction: float = 0.10
    kt_fraction: float = 0.05
    top_m_guided: int = 5
    zoom_patch_count: int = 1
    interactive: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not (0.0 < self.kt_fraction <= self.k1_fraction <= 1.0):
            raise ValueError("fractions must satisfy 0 < kt <= k1 <= 1")
        if self.zoom_patch_count < 1:
            raise ValueError("zoom_patch_count must be >= 1")
        if self.top_m_guided < 0:
            raise ValueError("top_m_guided must be >= 0")

    def to_dict(self) -> dict:
        return {
            "max_iterations": self.max_iterations,
            "initial_magnification": self.initial_magnification,
            "k1_fraction": self.k1_fraction,
            "kt_fraction": self.kt_fraction,
            "top_m_guided": self.top_m_guided,
            "zoom_patch_count": self.zoom_patch_count,
            "interactive": self.interactive,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SessionConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in (data or {}).items() if k in known})


@dataclass
class Checkpoint:
    """A pause point in interactive mode."""

    kind: str
    iteration: int
    pending: list[Patch] = field(default_factory=list)
    action: str | None = None
    degraded: bool = False

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "iteration": self.iteration,
            "pending": [records.patch_to_dict(p) for p in self.pending],
            "action": self.action,
            "degraded": self.degraded,
        }


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


class Session:
    """One question over one slide, driven to completion via ``advance()``.

    Non-interactive sessions run straight through; interactive sessions pause
    before the first sampling, after each sampling (pre-description), and
    after each reasoning step. ``advance`` and ``apply_intervention`` are
    serialized, so the loop is never mid-step when an intervention applies.
    """

    def __init__(self, bundle: SlideBundle, question: str, backends: Backends,
                 config: SessionConfig | None = None,
                 options: list[str] | None = None,
                 session_id: str | None = None,
                 clock: Callable[[], str] | None = None,
                 trajectory_path: str | Path | None = None,
                 index: PatchEmbeddingIndex | None = None):
        self.bundle = bundle
        self.question = question
        self.backends = backends
        self.config = config or SessionConfig()
        self.options = tuple(options or ())
        self.session_id = session_id or uuid.uuid4().hex[:12]
        self.clock = clock or _utc_now
        self.trajectory_path = Path(trajectory_path) if trajectory_path else None
        self.created_at = ""

        self.status = STATUS_RUNNING
        self.checkpoint: Checkpoint | None = None
        self.error: str | None = None

        self.states: list[AnalyticState] = []
        self.findings_by_iteration: dict[int, list[Patch]] = {}
        self.interventions: list[InterventionRecord] = []
        self.final: FinalAnswer | None = None
        self.events: list[dict] = []
        self.notes: list[str] = []

        self.exclusion = ExclusionSet()
        self._rationales: list[str] = []
        self._index = index
        self._pending_rois: list[Patch] | None = None
        self._zoom_override: int | None = None
        self._finalize_requested = False
        self._seq = 0
        self._gen = self._loop()
        self._step_lock = threading.RLock()
        self._event_cond = threading.Condition()

        self.bundle.level(self.config.initial_magnification)  # fail fast

    # -- event plumbing ------------------------------------------------------

    def _emit(self, event_kind: str, **fields) -> None:
        event = {"event": event_kind, "seq": self._seq, **fields}
        self._seq += 1
        with self._event_cond:
            self.events.append(event)
            self._event_cond.notify_all()
        if self.trajectory_path is not None:
            self.trajectory_path.parent.mkdir(parents=True, exist_ok=True)
            with self.trajectory_path.open("a", encoding="utf-8") as fh:
                fh.write(records.json_line(event) + "\n")

    def _emit_state(self, iteration: int) -> None:
        state = self.states[iteration - 1]
        event = records.state_event(self._seq, state, self.findings_by_iteration[iteration])
        del event["seq"]
        self._emit("state", **{k: v for k, v in event.items() if k != "event"})

    def wait_events(self, after_seq: int, timeout: float = 0.2) -> list[dict]:
        """Events with seq > after_seq, blocking briefly when none are ready."""
        with self._event_cond:
            fresh = [e for e in self.events if e["seq"] > after_seq]
            if not fresh and self.status not in (STATUS_DONE, STATUS_FAILED):
                self._event_cond.wait(timeout)
                fresh = [e for e in self.events if e["seq"] > after_seq]
            return list(fresh)

    # -- evidence helpers ----------------------------------------------------

    def _ensure_index(self) -> PatchEmbeddingIndex:
        if self._index is None or not self._index.has_level(self.config.initial_magnification):
            self._index = navigator.ensure_index(
                self.bundle, self.config.initial_magnification,
                self.backends.embedder, persist=False)
        return self._index

    def _take_pending_rois(self) -> list[Patch] | None:
        pending, self._pending_rois = self._pending_rois, None
        return pending

    def _remaining(self, total: int) -> int:
        return total - self.exclusion.count(self.config.initial_magnification)

    def _sample(self, query: str, iteration: int, total: int) -> list[Patch]:
        pending = self._take_pending_rois()
        if pending is not None:
            return pending
        k = navigator.k_schedule(total, iteration, self.config.k1_fraction,
                                 self.config.kt_fraction)
        return navigator.guided_sample(
            self._ensure_index(), query, self.exclusion, k,
            self.backends.embedder, self.config.initial_magnification, iteration)

    def _describe_into_state(self, iteration: int, findings: list[Patch]) -> None:
        descriptions = perceptor.describe_batch(
            findings, self.bundle, self.question, self.backends.perceptor,
            top_m=self.config.top_m_guided)
        self.exclusion.add(findings)
        entries = [
            StateEntry(d.patch.magnification, d.patch.col, d.patch.row,
                       d.patch.patch_index, d.text, d.prompt_kind, d.question)
            for d in descriptions
        ]
        self.states.append(AnalyticState(
            iteration, self.config.initial_magnification, entries,
            [p.patch_index for p in findings]))
        self.findings_by_iteration[iteration] = list(findings)
        self._emit_state(iteration)

    def _rendering(self, iteration: int, entries: list[StateEntry]) -> StateRendering:
        lines = [executor.render_note(n) for n in self.notes]
        lines += [
            executor.render_entry(e.magnification, e.col, e.row, e.text)
            for e in entries if e.available
        ]
        return StateRendering(
            question=self.question,
            entries=tuple(lines),
            iteration=iteration,
            prior_rationales=tuple(self._rationales),
            options=self.options,
        )

    def _iteration_rendering(self, iteration: int) -> StateRendering:
        return self._rendering(iteration, self.states[iteration - 1].entries)

    def _merged_rendering(self) -> StateRendering:
        merged = merge_states(self.states)
        return self._rendering(merged.iteration, merged.entries)

    def prompt_preview(self) -> str | None:
        """The predict-style prompt the reasoning backend would see right now."""
        if not self.states:
            return None
        return executor.predict_user_prompt(self._iteration_rendering(self.states[-1].iteration))

    # -- the loop ------------------------------------------------------------

    def _loop(self):
        cfg = self.config
        total = self.bundle.level(cfg.initial_magnification).patch_count
        self.created_at = self.clock()
        self._emit("session_start", session_id=self.session_id,
                   slide_id=self.bundle.slide_id, question=self.question,
                   options=list(self.options), config=cfg.to_dict(),
                   created_at=self.created_at)

        if cfg.interactive:
            yield Checkpoint(CHECKPOINT_PRE_SAMPLING, 1)

        iteration = 1
        findings = self._sample(self.question, 1, total)
        if cfg.interactive:
            yield Checkpoint(CHECKPOINT_POST_SAMPLING, 1, pending=findings)
            findings = self._take_pending_rois() or findings
        self._describe_into_state(1, findings)

        while True:
            rendering = self._iteration_rendering(iteration)
            predicted = executor.predict_answer(rendering, self.backends.executor)
            verdict = executor.self_reflect(rendering, predicted, self.backends.executor)

            directive: MissingInfoDirective | None = None
            warnings: list[str] = []
            if verdict.sufficient:
                action = ACTION_CONCLUDE
            elif iteration >= cfg.max_iterations:
                action = ACTION_FORCED_CONCLUDE
            else:
                try:
                    directive = executor.explore_missing_info(
                        rendering, predicted, self.backends.executor,
                        current_magnification=cfg.initial_magnification)
                except DirectiveContractError as exc:
                    if not exc.missing_info:
                        raise
                    directive = MissingInfoDirective(exc.missing_info, False)
                    warnings.append(f"zoom directive invalid ({exc}); degraded to exploration")
                action, directive, warnings = self._choose_action(iteration, directive, warnings)

            if cfg.interactive:
                yield Checkpoint(CHECKPOINT_POST_REASONING, iteration, action=action,
                                 degraded=bool(warnings))
                if self._finalize_requested and action in (ACTION_EXPLORE, ACTION_ZOOM):
                    action = ACTION_FORCED_CONCLUDE
                    warnings.append("concluded early by finalize intervention")

            record = ActionRecord(iteration, action, predicted, verdict, directive,
                                  tuple(warnings),
                                  prompt_preview=executor.predict_user_prompt(rendering))
            self._emit("action", **{k: v for k, v in records.action_event(0, record).items()
                                    if k not in ("event", "seq")})
            self._record_step_action(iteration, record)
            self._rationales.append(executor.format_rationale(
                iteration, predicted.answer, predicted.thinking_steps))

            if action in (ACTION_CONCLUDE, ACTION_FORCED_CONCLUDE):
                break
            if action == ACTION_ZOOM:
                assert directive is not None
                self._zoom(iteration, directive)
                break

            # explore: sample unexamined patches with the missing info as query
            assert directive is not None
            next_iteration = iteration + 1
            new_findings = self._sample(directive.missing_info, next_iteration, total)
            if cfg.interactive:
                yield Checkpoint(CHECKPOINT_POST_SAMPLING, next_iteration, pending=new_findings)
                if self._finalize_requested:
                    break
                new_findings = self._take_pending_rois() or new_findings
            if not new_findings:
                break  # pool drained between the remaining-check and sampling
            self._describe_into_state(next_iteration, new_findings)
            iteration = next_iteration

        self._conclude(iteration)

    def _choose_action(self, iteration: int, directive: MissingInfoDirective,
                       warnings: list[str]) -> tuple[str, MissingInfoDirective, list[str]]:
        cfg = self.config
        total = self.bundle.level(cfg.initial_magnification).patch_count
        if directive.zoom_recommendation:
            target = directive.recommended_zoom_level
            feasible = (target is not None and self.bundle.has_level(target)
                        and target % cfg.initial_magnification == 0)
            if feasible:
                return ACTION_ZOOM, directive, warnings
            warnings.append(
                f"zoom to {target}x not available on this slide; degraded to exploration")
            directive = replace(directive, zoom_recommendation=False,
                                recommended_zoom_level=None)
        if self._remaining(total) > 0:
            return ACTION_EXPLORE, directive, warnings
        warnings.append("candidate pool exhausted before sufficiency")
        return ACTION_FORCED_CONCLUDE, directive, warnings

    def _record_step_action(self, iteration: int, record: ActionRecord) -> None:
        # trajectory steps are derived from events on demand; nothing to do here
        # beyond keeping the latest action for summaries
        self._last_action = record

    def _zoom(self, iteration: int, directive: MissingInfoDirective) -> None:
        """Magnify the iteration's findings, describe the most relevant children."""
        from .slides import magnify_patch

        target = self._zoom_override or directive.recommended_zoom_level
        assert target is not None
        children: list[Patch] = []
        for patch in self.findings_by_iteration[iteration]:
            if patch.magnification == self.config.initial_magnification:
                children.extend(magnify_patch(self.bundle, patch, target))
        ranked = navigator.rank_magnified(self.bundle, children, directive.missing_info,
                                          self.backends.embedder, self._index)
        chosen = ranked[:self.config.zoom_patch_count]
        state = self.states[iteration - 1]
        for child in chosen:
            try:
                described = perceptor.describe_guided(
                    child, self.bundle, directive.missing_info, self.backends.perceptor)
                text = described.text
            except PerceptorError:
                text = perceptor.DESCRIPTION_UNAVAILABLE
            state.entries.append(StateEntry(
                child.magnification, child.col, child.row, child.patch_index,
                text, perceptor.KIND_GUIDED, directive.missing_info))
        self.exclusion.add(chosen)
        self.findings_by_iteration[iteration].extend(chosen)
        self._emit_state(iteration)

    def _conclude(self, iteration: int) -> None:
        rendering = self._merged_rendering()
        final = executor.final_answer(rendering, self._rationales, self.backends.executor)
        self.final = final
        self._emit("final", answer=final.answer, reasoning_chain=final.reasoning_chain,
                   iterations_used=final.iterations_used,
                   prompt_preview=executor.final_user_prompt(rendering, self._rationales),
                   finished_at=self.clock())

    # -- driving -------------------------------------------------------------

    def advance(self) -> Checkpoint | None:
        """Run to the next checkpoint; None when the session is finished."""
        with self._step_lock:
            if self.status in (STATUS_DONE, STATUS_FAILED):
                return None
            self.status = STATUS_RUNNING
            self.checkpoint = None
            try:
                checkpoint = next(self._gen)
            except StopIteration:
                self.status = STATUS_DONE
                with self._event_cond:
                    self._event_cond.notify_all()
                return None
            except (BackendError, ExecutorError, PerceptorError, BundleError,
                    navigator.NavigatorError) as exc:
                self.status = STATUS_FAILED
                self.error = f"{type(exc).__name__}: {exc}"
                self._emit("error", message=self.error, finished_at=self.clock())
                raise SessionAbortedError(self.error) from exc
            self.checkpoint = checkpoint
            self.status = STATUS_AWAITING if checkpoint.degraded else STATUS_PAUSED
            return checkpoint

    def run(self) -> Trajectory:
        """Advance through every checkpoint without interventions."""
        while self.advance() is not None:
            pass
        return self.trajectory()

    def trajectory(self) -> Trajectory:
        with self._event_cond:
            return trajectory_from_events(list(self.events))

    @property
    def current_iteration(self) -> int:
        if self.checkpoint is not None:
            return self.checkpoint.iteration
        return max((s.iteration for s in self.states), default=0)

    def summary(self) -> dict:
        last = getattr(self, "_last_action", None)
        return {
            "id": self.session_id,
            "status": self.status,
            "current_iteration": self.current_iteration,
            "created_at": self.created_at,
            "checkpoint": self.checkpoint.to_dict() if self.checkpoint else None,
            "entry_count": sum(len(s.entries) for s in self.states),
            "last_action": last.action if last else None,
            "final": ({"answer": self.final.answer,
                       "reasoning_chain": self.final.reasoning_chain,
                       "iterations_used": self.final.iterations_used}
                      if self.final else None),
            "prompt_preview": self.prompt_preview(),
            "error": self.error,
        }

    # -- interventions -------------------------------------------------------

    def apply_intervention(self, kind: str, payload: dict | None = None,
                           author: str = "human") -> dict:
        """Apply one human intervention at the current checkpoint."""
        payload = payload or {}
        with self._step_lock:
            if self.status not in (STATUS_PAUSED, STATUS_AWAITING):
                raise SessionStateError(f"session is {self.status}, not paused")
            if kind not in records.INTERVENTION_KINDS:
                raise InterventionError(f"unknown intervention kind {kind!r}")
            handler = getattr(self, f"_apply_{kind}")
            handler(payload)
            record = InterventionRecord(
                at_iteration=self.checkpoint.iteration if self.checkpoint else 0,
                kind=kind, payload=payload, author=author, timestamp=self.clock())
            self.interventions.append(record)
            self._emit("intervention", at_iteration=record.at_iteration, kind=kind,
                       payload=payload, author=author, timestamp=record.timestamp)
            return self.summary()

    def _parse_payload_patches(self, payload: dict) -> list[Patch]:
        raw = payload.get("patches")
        if not isinstance(raw, list) or not raw:
            raise InterventionError("select_rois payload needs a non-empty 'patches' list")
        base = self.config.initial_magnification
        patches: list[Patch] = []
        seen: set[tuple[int, int]] = set()
        for item in raw:
            try:
                mag = int(item["magnification"])
                col, row = int(item["col"]), int(item["row"])
            except (KeyError, TypeError, ValueError) as exc:
                raise InterventionError(f"bad patch reference {item!r}") from exc
            if mag != base:
                raise InterventionError(
                    f"RoI selection must be at the sampling magnification {base}x")
            if (col, row) in seen:
                raise InterventionError(f"duplicate patch ({col}, {row})")
            seen.add((col, row))
            try:
                patches.append(self.bundle.patch(mag, col, row))
            except BundleError as exc:
                raise InterventionError(str(exc)) from exc
        return patches

    def _apply_select_rois(self, payload: dict) -> None:
        if self.checkpoint is None or self.checkpoint.kind not in (
                CHECKPOINT_PRE_SAMPLING, CHECKPOINT_POST_SAMPLING):
            raise InterventionError("select_rois requires a sampling checkpoint")
        self._pending_rois = self._parse_payload_patches(payload)

    def _apply_edit_description(self, payload: dict) -> None:
        try:
            iteration = int(payload["iteration"])
            mag, col, row = int(payload["magnification"]), int(payload["col"]), int(payload["row"])
            text = payload["text"]
        except (KeyError, TypeError, ValueError) as exc:
            raise InterventionError(
                "edit_description payload needs iteration, magnification, col, row, text") from exc
        if not isinstance(text, str) or not text.strip():
            raise InterventionError("replacement text must be a non-empty string")
        if not (1 <= iteration <= len(self.states)):
            raise InterventionError(f"no state for iteration {iteration}")
        state = self.states[iteration - 1]
        for i, entry in enumerate(state.entries):
            if (entry.magnification, entry.col, entry.row) == (mag, col, row):
                state.entries[i] = replace(entry, text=text)
                self._emit_state(iteration)
                return
        raise InterventionError(f"no entry at mag={mag} loc=({col},{row}) in iteration {iteration}")

    def _apply_inject_note(self, payload: dict) -> None:
        text = payload.get("text")
        if not isinstance(text, str) or not text.strip():
            raise InterventionError("inject_note payload needs non-empty 'text'")
        self.notes.append(text)

    def _apply_set_magnification(self, payload: dict) -> None:
        try:
            mag = int(payload["magnification"])
        except (KeyError, TypeError, ValueError) as exc:
            raise InterventionError("set_magnification payload needs 'magnification'") from exc
        base = self.config.initial_magnification
        if mag <= base:
            raise InterventionError(f"magnification must increase (current {base}x)")
        if mag not in executor.ZOOM_LEVELS:
            raise InterventionError(f"magnification must be one of {executor.ZOOM_LEVELS}")
        if not self.bundle.has_level(mag):
            raise InterventionError(f"slide has no {mag}x level")
        self._zoom_override = mag

    def _apply_finalize(self, payload: dict) -> None:
        if not any(e.available for s in self.states for e in s.entries):
            raise InterventionError("cannot finalize before any evidence is described")
        self._finalize_requested = True


def merge_states(states: list[AnalyticState]) -> AnalyticState:
    """Union of entries across iterations, deduplicated by (magnification, loc).

    The later description wins (it is the more specific one); positions keep
    chronological-then-relevance order of first appearance.
    """
    if not states:
        raise ValueError("merge_states needs at least one state")
    merged: list[StateEntry] = []
    slot: dict[tuple[int, int, int], int] = {}
    order: list[int] = []
    seen_order: set[int] = set()
    for state in states:
        for entry in state.entries:
            key = (entry.magnification, entry.col, entry.row)
            if key in slot:
                merged[slot[key]] = entry
            else:
                slot[key] = len(merged)
                merged.append(entry)
        for idx in state.relevance_order:
            if idx not in seen_order:
                seen_order.add(idx)
                order.append(idx)
    return AnalyticState(states[-1].iteration, states[0].magnification, merged, order)


def run_session(bundle: SlideBundle, question: str, backends: Backends,
                config: SessionConfig | None = None,
                options: list[str] | None = None,
                session_id: str | None = None,
                clock: Callable[[], str] | None = None,
                trajectory_path: str | Path | None = None,
                index: PatchEmbeddingIndex | None = None) -> Trajectory:
    """Run one question to completion and return its trajectory."""
    session = Session(bundle, question, backends, config, options, session_id,
                      clock, trajectory_path, index)
    return session.run()
