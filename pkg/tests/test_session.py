"""The iterative loop: action selection, state bookkeeping, interventions, persistence."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FINAL_JSON, explore_json, scripted_backends
from slideagent.backends import Backends, ScriptedEmbeddingBackend, \
    ScriptedTextChatBackend, ScriptedVisionChatBackend
from slideagent.records import (
    ACTION_CONCLUDE,
    ACTION_EXPLORE,
    ACTION_FORCED_CONCLUDE,
    ACTION_ZOOM,
    STATUS_DONE,
    STATUS_PAUSED,
    AnalyticState,
    StateEntry,
    TrajectoryLoadError,
    load_trajectory,
    persist_trajectory,
    trajectory_from_events,
)
from slideagent.session import (
    InterventionError,
    Session,
    SessionAbortedError,
    SessionConfig,
    SessionStateError,
    merge_states,
    run_session,
)
from slideagent.slides import write_bundle

FIXED_CLOCK = lambda: "2026-01-01T00:00:00+00:00"  # noqa: E731


def entry(mag=5, col=0, row=0, idx=0, text="t", kind="generic", question=None):
    return StateEntry(mag, col, row, idx, text, kind, question)


class TestMergeStates:
    def test_disjoint_union(self):
        s1 = AnalyticState(1, 5, [entry(col=0), entry(col=1, idx=1)], [0, 1])
        s2 = AnalyticState(2, 5, [entry(col=2, idx=2)], [2])
        merged = merge_states([s1, s2])
        assert len(merged.entries) == 3
        assert merged.iteration == 2

    def test_duplicate_keeps_later_description(self):
        generic = entry(col=1, row=1, idx=5, text="generic text", kind="generic")
        guided = entry(col=1, row=1, idx=5, text="guided text", kind="question_guided",
                       question="q")
        merged = merge_states([
            AnalyticState(1, 5, [generic], [5]),
            AnalyticState(2, 5, [guided], [5]),
        ])
        assert len(merged.entries) == 1
        assert merged.entries[0].text == "guided text"

    def test_single_state_identity(self):
        state = AnalyticState(1, 5, [entry()], [0])
        merged = merge_states([state])
        assert merged.entries == state.entries

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            merge_states([])


class TestActionPaths:
    def test_conclude_first_iteration(self, small_bundle):
        trajectory = run_session(small_bundle, "What grade?",
                                 scripted_backends(["Yes"]), SessionConfig())
        assert trajectory.actions == [ACTION_CONCLUDE]
        assert trajectory.iterations_used == 1
        assert trajectory.final is not None
        assert trajectory.final.answer == json.loads(FINAL_JSON)["answer"]
        assert trajectory.status == STATUS_DONE

    def test_zoom_then_conclude(self, pyramid_bundle):
        backends = scripted_backends(
            ["No"], [explore_json("nuclear detail", "Yes", 40, "need cytology")])
        trajectory = run_session(pyramid_bundle, "What grade?", backends, SessionConfig())
        assert trajectory.actions == [ACTION_ZOOM]
        assert trajectory.iterations_used == 1
        step = trajectory.steps[0]
        zoomed = [e for e in step.state.entries if e.magnification == 40]
        assert len(zoomed) == 1
        assert zoomed[0].question == "nuclear detail"
        assert trajectory.final is not None

    def test_explore_then_conclude_third_iteration(self, grid10_bundle):
        backends = scripted_backends(["No", "No", "Yes"])
        trajectory = run_session(grid10_bundle, "What grade?", backends, SessionConfig())
        assert trajectory.actions == [ACTION_EXPLORE, ACTION_EXPLORE, ACTION_CONCLUDE]
        assert [s.state.iteration for s in trajectory.steps] == [1, 2, 3]
        assert len(trajectory.steps[0].findings) == 10  # ceil(0.1 * 100)
        assert len(trajectory.steps[1].findings) == 5   # ceil(0.05 * 100)
        assert len(trajectory.steps[2].findings) == 5

    def test_forced_conclude_at_budget(self, grid10_bundle):
        backends = scripted_backends(["No"] * 5)
        trajectory = run_session(grid10_bundle, "What grade?", backends,
                                 SessionConfig(max_iterations=5))
        assert trajectory.actions == [ACTION_EXPLORE] * 4 + [ACTION_FORCED_CONCLUDE]
        assert trajectory.iterations_used == 5
        examined = [p for s in trajectory.steps for p in s.findings]
        assert len(examined) == 30
        assert len({(p.magnification, p.patch_index) for p in examined}) == 30

    def test_findings_disjoint_across_iterations(self, grid10_bundle):
        backends = scripted_backends(["No", "No", "No", "Yes"])
        trajectory = run_session(grid10_bundle, "q", backends, SessionConfig())
        seen = set()
        for step in trajectory.steps:
            for patch in step.findings:
                key = (patch.magnification, patch.patch_index)
                assert key not in seen
                seen.add(key)

    def test_pool_exhaustion_forces_conclusion(self, small_bundle):
        # 12 patches at 5x; k1=2, kt=1 -> pool runs out by iteration 11
        backends = scripted_backends(["No"] * 20)
        trajectory = run_session(small_bundle, "q", backends,
                                 SessionConfig(max_iterations=20))
        assert trajectory.actions[-1] == ACTION_FORCED_CONCLUDE
        examined = [p for s in trajectory.steps for p in s.findings]
        assert len(examined) == 12
        assert any("pool exhausted" in w
                   for s in trajectory.steps if s.action
                   for w in s.action.warnings)

    def test_zoom_level_absent_degrades_to_explore(self, grid10_bundle):
        # bundle has only 5x, so the 40x zoom cannot happen
        backends = scripted_backends(
            ["No", "Yes"], [explore_json("detail", "Yes", 40, "r")])
        trajectory = run_session(grid10_bundle, "q", backends, SessionConfig())
        assert trajectory.actions == [ACTION_EXPLORE, ACTION_CONCLUDE]
        first_action = trajectory.steps[0].action
        assert any("not available" in w for w in first_action.warnings)

    def test_zoom_directive_contract_violation_degrades(self, grid10_bundle):
        bad = json.dumps({
            "missing_info": "mitoses", "zoom_recommendation": "Yes",
            "recommended_zoom_level": "None", "zoom_reason": "",
        })
        backends = scripted_backends(["No", "Yes"], [bad])
        trajectory = run_session(grid10_bundle, "q", backends, SessionConfig())
        assert trajectory.actions == [ACTION_EXPLORE, ACTION_CONCLUDE]
        assert any("degraded to exploration" in w
                   for w in trajectory.steps[0].action.warnings)

    def test_explore_uses_missing_info_as_query(self, grid10_bundle):
        seen_queries = []

        class SpyEmbedder(ScriptedEmbeddingBackend):
            def embed_text(self, text):
                seen_queries.append(text)
                return super().embed_text(text)

        backends = scripted_backends(["No", "Yes"],
                                     [explore_json("tubule formation and stroma")])
        backends.embedder = SpyEmbedder(dim=32)
        run_session(grid10_bundle, "the question", backends, SessionConfig())
        assert "the question" in seen_queries
        assert "tubule formation and stroma" in seen_queries

    def test_backend_failure_aborts_with_partial_trajectory(self, small_bundle, tmp_path):
        backends = Backends(
            embedder=ScriptedEmbeddingBackend(dim=8),
            perceptor=ScriptedVisionChatBackend(),
            executor=ScriptedTextChatBackend([]),  # predict immediately unmatched
        )
        path = tmp_path / "trajectory.jsonl"
        session = Session(small_bundle, "q", backends, SessionConfig(),
                          trajectory_path=path)
        with pytest.raises(SessionAbortedError):
            session.run()
        assert session.status == "failed"
        loaded = load_trajectory(path)
        assert loaded.status == "failed"
        assert loaded.error and "ScriptExhausted" in loaded.error
        assert len(loaded.steps) == 1  # the described first state survived

    def test_options_rendered_into_prompts(self, small_bundle):
        seen = []

        class Spy(ScriptedTextChatBackend):
            def complete(self, system_prompt, user_prompt, decoding=None):
                seen.append(user_prompt)
                return super().complete(system_prompt, user_prompt, decoding)

        backends = scripted_backends(["Yes"])
        backends.executor = Spy(backends.executor._matcher._rules)
        run_session(small_bundle, "Which grade?", backends, SessionConfig(),
                    options=["Grade I/III", "Grade II/III"])
        assert all("Options: A) Grade I/III B) Grade II/III" in p for p in seen)


class TestActionExclusivity:
    @settings(max_examples=30, deadline=None)
    @given(
        verdicts=st.lists(st.booleans(), min_size=1, max_size=6),
        zoom=st.booleans(),
        data=st.data(),
    )
    def test_every_iteration_has_one_action_and_terminals_end_the_loop(
            self, tmp_path_factory, verdicts, zoom, data):
        bundle_dir = tmp_path_factory.mktemp("fuzz") / "b"
        bundle = write_bundle(bundle_dir, "b", [(5, 5, 5), (20, 20, 20)],
                              tile_size_px=16)
        reflect = ["Yes" if v else "No" for v in verdicts]
        explore = []
        if zoom:
            # a zoom directive somewhere in the insufficient iterations
            explore.append(explore_json("fine detail", "Yes", 20, "r"))
        backends = scripted_backends(reflect + ["Yes"] * 6, explore)
        trajectory = run_session(bundle, "q", backends,
                                 SessionConfig(max_iterations=4))
        actions = trajectory.actions
        # exactly one action per described iteration
        assert len(actions) == len(trajectory.steps)
        # every action before the last is a non-terminating Explore
        assert all(a == ACTION_EXPLORE for a in actions[:-1])
        # the last action always terminates
        assert actions[-1] in (ACTION_CONCLUDE, ACTION_ZOOM, ACTION_FORCED_CONCLUDE)
        assert trajectory.iterations_used <= 4
        assert trajectory.final is not None


class TestZoomPatchCount:
    def test_zoom_adds_exactly_the_configured_entries(self, pyramid_bundle):
        backends = scripted_backends(
            ["No"], [explore_json("nuclear detail", "Yes", 20, "r")])
        trajectory = run_session(pyramid_bundle, "q", backends,
                                 SessionConfig(zoom_patch_count=3))
        entries = trajectory.steps[0].state.entries
        zoomed = [e for e in entries if e.magnification == 20]
        assert len(zoomed) == 3
        assert len({(e.col, e.row) for e in zoomed}) == 3


class TestReplayDeterminism:
    def test_byte_identical_across_reruns(self, grid10_bundle, tmp_path):
        blobs = []
        for run in range(3):
            path = tmp_path / f"run{run}.jsonl"
            run_session(grid10_bundle, "What grade?", scripted_backends(["No"] * 5),
                        SessionConfig(), session_id="fixed-session",
                        clock=FIXED_CLOCK, trajectory_path=path)
            blobs.append(path.read_bytes())
        assert blobs[0] == blobs[1] == blobs[2]


class TestPersistence:
    def _trajectory(self, small_bundle, tmp_path):
        path = tmp_path / "t.jsonl"
        trajectory = run_session(small_bundle, "q?", scripted_backends(["Yes"]),
                                 SessionConfig(), trajectory_path=path)
        return trajectory, path

    def test_round_trip_equality(self, small_bundle, tmp_path):
        trajectory, path = self._trajectory(small_bundle, tmp_path)
        loaded = load_trajectory(path)
        assert loaded == trajectory
        repersisted = tmp_path / "again.jsonl"
        persist_trajectory(loaded, repersisted)
        assert repersisted.read_bytes() == path.read_bytes()

    def test_truncated_line_reports_number(self, small_bundle, tmp_path):
        _, path = self._trajectory(small_bundle, tmp_path)
        lines = path.read_text().splitlines()
        lines[-1] = lines[-1][: len(lines[-1]) // 2]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(TrajectoryLoadError) as err:
            load_trajectory(path)
        assert err.value.line == len(lines)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(TrajectoryLoadError) as err:
            load_trajectory(path)
        assert "no session header" in str(err.value)

    def test_events_without_header_rejected(self):
        with pytest.raises(TrajectoryLoadError):
            trajectory_from_events([{"event": "state", "seq": 0}])


class TestInterventions:
    def _interactive(self, bundle, reflect=("Yes",), explore=None,
                     config=None) -> Session:
        cfg = config or SessionConfig(interactive=True)
        return Session(bundle, "Which grade?", scripted_backends(list(reflect), explore),
                       cfg, clock=FIXED_CLOCK)

    def test_starts_paused_before_sampling(self, small_bundle):
        session = self._interactive(small_bundle)
        checkpoint = session.advance()
        assert checkpoint is not None and checkpoint.kind == "pre_sampling"
        assert session.status == STATUS_PAUSED
        assert session.states == []

    def test_select_rois_replaces_sampling(self, small_bundle):
        session = self._interactive(small_bundle)
        session.advance()
        session.apply_intervention("select_rois", {"patches": [
            {"magnification": 5, "col": 0, "row": 0},
            {"magnification": 5, "col": 1, "row": 0},
            {"magnification": 5, "col": 2, "row": 0},
        ]})
        session.advance()  # post_sampling
        session.run()
        trajectory = session.trajectory()
        assert [p.loc for p in trajectory.steps[0].findings] == [(0, 0), (1, 0), (2, 0)]
        assert len(trajectory.steps[0].state.entries) == 3
        assert any(i.kind == "select_rois" for i in trajectory.interventions)

    def test_select_rois_invalid_patch_rejected(self, small_bundle):
        session = self._interactive(small_bundle)
        session.advance()
        with pytest.raises(InterventionError):
            session.apply_intervention("select_rois", {"patches": [
                {"magnification": 5, "col": 99, "row": 0}]})
        # session unchanged: still paused at the same checkpoint
        assert session.checkpoint.kind == "pre_sampling"

    def test_edit_description_changes_later_prompts(self, small_bundle):
        session = self._interactive(small_bundle)
        session.advance()  # pre_sampling
        session.advance()  # post_sampling
        session.advance()  # post_reasoning (after predict/reflect Yes)
        state = session.states[0]
        target = state.entries[0]
        session.apply_intervention("edit_description", {
            "iteration": 1, "magnification": target.magnification,
            "col": target.col, "row": target.row,
            "text": "corrected: benign duct epithelium",
        })
        assert session.prompt_preview() and "corrected: benign duct epithelium" in session.prompt_preview()
        session.run()
        trajectory = session.trajectory()
        final_event = [e for e in trajectory.events if e["event"] == "final"][0]
        assert "corrected: benign duct epithelium" in final_event["prompt_preview"]

    def test_edit_description_unknown_entry(self, small_bundle):
        session = self._interactive(small_bundle)
        session.advance()
        session.advance()
        session.advance()
        with pytest.raises(InterventionError):
            session.apply_intervention("edit_description", {
                "iteration": 1, "magnification": 5, "col": 3, "row": 2, "text": "x"})

    def test_inject_note_rendered_ahead(self, small_bundle):
        session = self._interactive(small_bundle)
        session.advance()
        session.apply_intervention("inject_note", {"text": "patient has prior DCIS"})
        session.advance()
        session.advance()
        preview = session.prompt_preview()
        assert "[expert note]: patient has prior DCIS" in preview
        evidence_pos = preview.find("mag=5x")
        note_pos = preview.find("[expert note]")
        assert note_pos < evidence_pos

    def test_set_magnification_overrides_zoom(self, pyramid_bundle):
        session = self._interactive(
            pyramid_bundle, reflect=("No",),
            explore=[explore_json("detail", "Yes", 40, "r")])
        session.advance()  # pre_sampling
        session.advance()  # post_sampling
        checkpoint = session.advance()  # post_reasoning with Zoom pending
        assert checkpoint.action == ACTION_ZOOM
        session.apply_intervention("set_magnification", {"magnification": 20})
        session.run()
        trajectory = session.trajectory()
        zoom_entries = [e for e in trajectory.steps[0].state.entries
                        if e.magnification > 5]
        assert len(zoom_entries) == 1 and zoom_entries[0].magnification == 20

    def test_set_magnification_must_increase(self, pyramid_bundle):
        session = self._interactive(pyramid_bundle)
        session.advance()
        with pytest.raises(InterventionError):
            session.apply_intervention("set_magnification", {"magnification": 5})

    def test_finalize_jumps_to_conclusion(self, grid10_bundle):
        session = self._interactive(grid10_bundle, reflect=("No",) * 5)
        session.advance()  # pre_sampling
        session.advance()  # post_sampling
        session.advance()  # post_reasoning (Explore pending)
        session.apply_intervention("finalize", {})
        session.run()
        trajectory = session.trajectory()
        assert trajectory.final is not None
        assert trajectory.iterations_used == 1
        assert trajectory.actions[-1] == ACTION_FORCED_CONCLUDE

    def test_finalize_without_evidence_rejected(self, small_bundle):
        session = self._interactive(small_bundle)
        session.advance()
        with pytest.raises(InterventionError):
            session.apply_intervention("finalize", {})

    def test_intervention_on_running_session_rejected(self, small_bundle):
        trajectory_session = Session(small_bundle, "q", scripted_backends(["Yes"]),
                                     SessionConfig())
        trajectory_session.run()
        with pytest.raises(SessionStateError):
            trajectory_session.apply_intervention("inject_note", {"text": "late"})

    def test_iteration_count_never_exceeds_budget(self, grid10_bundle):
        session = self._interactive(grid10_bundle, reflect=("No",) * 5,
                                    config=SessionConfig(interactive=True, max_iterations=3))
        session.advance()
        session.apply_intervention("inject_note", {"text": "note"})
        trajectory = session.run()
        assert trajectory.iterations_used <= 3

    def test_checkpoint_order(self, grid10_bundle):
        session = self._interactive(grid10_bundle, reflect=("No", "Yes"))
        kinds = []
        while (checkpoint := session.advance()) is not None:
            kinds.append(checkpoint.kind)
        assert kinds == [
            "pre_sampling", "post_sampling", "post_reasoning",  # iteration 1 (explore)
            "post_sampling", "post_reasoning",                  # iteration 2 (conclude)
        ]
