"""HTTP API contract: status codes, intervention flow, event stream, tiles."""

from __future__ import annotations

import json
import time

import pytest
from fastapi.testclient import TestClient

from conftest import scripted_backends
from slideagent.records import STATUS_DONE
from slideagent.service import create_app
from slideagent.session import SessionConfig
from slideagent.slides import write_bundle


@pytest.fixture
def api(tmp_path):
    slides_dir = tmp_path / "slides"
    write_bundle(slides_dir / "slide-a", "slide-a", [(5, 4, 3), (20, 16, 12)],
                 tile_size_px=16)
    backends = scripted_backends(["No", "Yes"] * 10)
    app = create_app(slides_dir, backends, tmp_path / "sessions",
                     SessionConfig(), max_sessions=4)
    with TestClient(app) as client:
        client.sessions_dir = tmp_path / "sessions"
        yield client


def wait_done(client, session_id: str, timeout: float = 5.0) -> dict:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        body = client.get(f"/v1/sessions/{session_id}").json()
        if body["status"] in ("done", "failed"):
            return body
        time.sleep(0.02)
    raise AssertionError("session did not finish in time")


class TestSlideEndpoints:
    def test_list_slides(self, api):
        body = api.get("/v1/slides").json()
        assert [s["slide_id"] for s in body] == ["slide-a"]
        assert body[0]["levels"][0] == {"magnification": 5, "grid_w": 4, "grid_h": 3}

    def test_manifest(self, api):
        body = api.get("/v1/slides/slide-a/manifest").json()
        assert body["slide_id"] == "slide-a"
        assert len(body["levels"]) == 2

    def test_manifest_unknown_slide(self, api):
        assert api.get("/v1/slides/nope/manifest").status_code == 404

    def test_tile_bytes_with_cache_headers(self, api):
        response = api.get("/v1/slides/slide-a/tiles/5/1/2")
        assert response.status_code == 200
        assert response.headers["content-type"] == "image/png"
        assert "max-age" in response.headers["cache-control"]
        assert response.content[:4] == b"\x89PNG"

    def test_tile_out_of_grid(self, api):
        assert api.get("/v1/slides/slide-a/tiles/5/99/0").status_code == 404
        assert api.get("/v1/slides/slide-a/tiles/40/0/0").status_code == 404


class TestSessionLifecycle:
    def test_noninteractive_runs_to_done(self, api):
        response = api.post("/v1/sessions", json={"slide_id": "slide-a",
                                                  "question": "Which grade?"})
        assert response.status_code == 201
        session_id = response.json()["id"]
        body = wait_done(api, session_id)
        assert body["status"] == STATUS_DONE
        assert body["final"]["answer"]
        trajectory = api.get(f"/v1/sessions/{session_id}/trajectory").json()
        assert any(e["event"] == "action" for e in trajectory)

    def test_unknown_slide_404(self, api):
        response = api.post("/v1/sessions", json={"slide_id": "ghost", "question": "q"})
        assert response.status_code == 404

    def test_malformed_body_400(self, api):
        response = api.post("/v1/sessions", json={"slide_id": "slide-a"})
        assert response.status_code == 400
        assert any("question" in str(e["loc"]) for e in response.json()["detail"])

    def test_bad_config_400(self, api):
        response = api.post("/v1/sessions", json={
            "slide_id": "slide-a", "question": "q",
            "config": {"max_iterations": 0}})
        assert response.status_code == 400

    def test_unknown_session_404(self, api):
        assert api.get("/v1/sessions/nope").status_code == 404
        assert api.post("/v1/sessions/nope/resume").status_code == 404

    def test_resume_on_finished_session_409(self, api):
        session_id = api.post("/v1/sessions", json={
            "slide_id": "slide-a", "question": "q"}).json()["id"]
        wait_done(api, session_id)
        assert api.post(f"/v1/sessions/{session_id}/resume").status_code == 409

    def test_intervention_on_finished_session_409(self, api):
        session_id = api.post("/v1/sessions", json={
            "slide_id": "slide-a", "question": "q"}).json()["id"]
        wait_done(api, session_id)
        response = api.post(f"/v1/sessions/{session_id}/interventions",
                            json={"kind": "inject_note", "payload": {"text": "x"}})
        assert response.status_code == 409

    def test_session_limit_429(self, api):
        for _ in range(4):
            api.post("/v1/sessions", json={"slide_id": "slide-a", "question": "q",
                                           "config": {"interactive": True}})
        response = api.post("/v1/sessions", json={"slide_id": "slide-a", "question": "q"})
        assert response.status_code == 429


class TestInteractiveFlow:
    def test_full_steering_flow(self, api):
        # create paused -> resume to evidence -> edit a description -> resume to done
        created = api.post("/v1/sessions", json={
            "slide_id": "slide-a", "question": "Which grade?",
            "options": ["Grade I/III", "Grade III/III"],
            "config": {"interactive": True},
        })
        assert created.status_code == 201
        body = created.json()
        session_id = body["id"]
        assert body["status"] == "paused"
        assert body["checkpoint"]["kind"] == "pre_sampling"

        body = api.post(f"/v1/sessions/{session_id}/resume").json()
        assert body["checkpoint"]["kind"] == "post_sampling"
        pending = body["checkpoint"]["pending"]
        assert len(pending) >= 1

        body = api.post(f"/v1/sessions/{session_id}/resume").json()
        assert body["checkpoint"]["kind"] == "post_reasoning"

        target = pending[0]
        response = api.post(f"/v1/sessions/{session_id}/interventions", json={
            "kind": "edit_description",
            "payload": {"iteration": 1, "magnification": target["magnification"],
                        "col": target["col"], "row": target["row"],
                        "text": "reviewed: high-grade nuclei with mitoses"},
            "author": "dr-chen",
        })
        assert response.status_code == 200
        assert "reviewed: high-grade nuclei" in response.json()["prompt_preview"]

        while True:
            body = api.post(f"/v1/sessions/{session_id}/resume").json()
            if body["status"] in ("done", "failed"):
                break
        assert body["status"] == "done"

        trajectory = api.get(f"/v1/sessions/{session_id}/trajectory").json()
        final_events = [e for e in trajectory if e["event"] == "final"]
        assert len(final_events) == 1
        assert "reviewed: high-grade nuclei" in final_events[0]["prompt_preview"]
        interventions = [e for e in trajectory if e["event"] == "intervention"]
        assert interventions and interventions[0]["author"] == "dr-chen"

        # API trajectory equals the persisted event log
        persisted = (api.sessions_dir / f"{session_id}.jsonl").read_text().splitlines()
        assert [json.loads(line) for line in persisted] == trajectory

    def test_invalid_intervention_payload_422(self, api):
        session_id = api.post("/v1/sessions", json={
            "slide_id": "slide-a", "question": "q",
            "config": {"interactive": True}}).json()["id"]
        response = api.post(f"/v1/sessions/{session_id}/interventions", json={
            "kind": "select_rois", "payload": {"patches": []}})
        assert response.status_code == 422
        response = api.post(f"/v1/sessions/{session_id}/interventions", json={
            "kind": "select_rois",
            "payload": {"patches": [{"magnification": 5, "col": 99, "row": 0}]}})
        assert response.status_code == 422
        response = api.post(f"/v1/sessions/{session_id}/interventions", json={
            "kind": "no_such_kind", "payload": {}})
        assert response.status_code == 422

    def test_select_rois_drives_description(self, api):
        session_id = api.post("/v1/sessions", json={
            "slide_id": "slide-a", "question": "q",
            "config": {"interactive": True}}).json()["id"]
        chosen = [{"magnification": 5, "col": 0, "row": 0},
                  {"magnification": 5, "col": 1, "row": 1},
                  {"magnification": 5, "col": 2, "row": 2}]
        response = api.post(f"/v1/sessions/{session_id}/interventions", json={
            "kind": "select_rois", "payload": {"patches": chosen}})
        assert response.status_code == 200
        while True:
            body = api.post(f"/v1/sessions/{session_id}/resume").json()
            if body["status"] in ("done", "failed"):
                break
        trajectory = api.get(f"/v1/sessions/{session_id}/trajectory").json()
        state = next(e for e in trajectory if e["event"] == "state")
        assert [(p["col"], p["row"]) for p in state["findings"]] == [(0, 0), (1, 1), (2, 2)]


class TestBackendOutage:
    def test_failed_session_still_readable(self, tmp_path):
        from slideagent.backends import (
            Backends,
            ScriptedEmbeddingBackend,
            ScriptedTextChatBackend,
            ScriptedVisionChatBackend,
        )

        slides_dir = tmp_path / "slides"
        write_bundle(slides_dir / "s", "s", [(5, 2, 2)], tile_size_px=16)
        broken = Backends(
            embedder=ScriptedEmbeddingBackend(dim=8),
            perceptor=ScriptedVisionChatBackend(),
            executor=ScriptedTextChatBackend([]),  # every reasoning call fails
        )
        app = create_app(slides_dir, broken, tmp_path / "sessions", SessionConfig())
        with TestClient(app) as client:
            session_id = client.post("/v1/sessions", json={
                "slide_id": "s", "question": "q"}).json()["id"]
            deadline = time.monotonic() + 5
            while time.monotonic() < deadline:
                response = client.get(f"/v1/sessions/{session_id}")
                assert response.status_code == 200  # status reads stay 200
                if response.json()["status"] == "failed":
                    break
                time.sleep(0.02)
            body = response.json()
            assert body["status"] == "failed"
            assert "ScriptExhausted" in body["error"]
            trajectory = client.get(f"/v1/sessions/{session_id}/trajectory").json()
            assert trajectory[-1]["event"] == "error"


class TestEventStream:
    def test_events_in_order_without_gaps(self, api):
        session_id = api.post("/v1/sessions", json={
            "slide_id": "slide-a", "question": "q"}).json()["id"]
        wait_done(api, session_id)
        seqs = []
        with api.stream("GET", f"/v1/sessions/{session_id}/events") as response:
            assert response.headers["content-type"].startswith("text/event-stream")
            ended = False
            for line in response.iter_lines():
                if line.startswith("data: ") and not ended:
                    payload = json.loads(line[len("data: "):])
                    if payload:
                        seqs.append(payload["seq"])
                if line.startswith("event: end"):
                    ended = True
        assert seqs == list(range(len(seqs)))
        trajectory = api.get(f"/v1/sessions/{session_id}/trajectory").json()
        assert len(seqs) == len(trajectory)

    def test_reconnect_with_last_event_id(self, api):
        session_id = api.post("/v1/sessions", json={
            "slide_id": "slide-a", "question": "q"}).json()["id"]
        wait_done(api, session_id)
        with api.stream("GET", f"/v1/sessions/{session_id}/events",
                        headers={"Last-Event-ID": "1"}) as response:
            first = None
            for line in response.iter_lines():
                if line.startswith("data: "):
                    payload = json.loads(line[len("data: "):])
                    if payload:
                        first = payload["seq"]
                        break
        assert first == 2
