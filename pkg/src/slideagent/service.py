"""HTTP service: slide browsing, session lifecycle, live events, interventions.

Sessions run against the configured backend suite. Interactive sessions start
paused before sampling and advance one checkpoint per resume call;
non-interactive sessions run on a background thread. The trajectory endpoint
serves exactly the persisted event log.
"""

from __future__ import annotations

import json
import logging
import threading
from pathlib import Path

from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, StreamingResponse
from pydantic import BaseModel

from .backends import Backends
from .navigator import PatchEmbeddingIndex, ensure_index
from .records import STATUS_AWAITING, STATUS_DONE, STATUS_FAILED, STATUS_PAUSED
from .session import (
    InterventionError,
    Session,
    SessionAbortedError,
    SessionConfig,
    SessionStateError,
)
from .slides import (
    BundleError,
    LevelNotFoundError,
    PatchMismatchError,
    SlideBundle,
    TileReadError,
    load_bundle,
    tile_bytes,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_SESSIONS = 8


class SlideRegistry:
    """Lazy-loading view over a directory of slide bundles; bundles and
    embedding indices are shared across sessions."""

    def __init__(self, slides_dir: str | Path, backends: Backends):
        self.slides_dir = Path(slides_dir)
        self.backends = backends
        self._bundles: dict[str, SlideBundle] = {}
        self._indices: dict[tuple[str, int], PatchEmbeddingIndex] = {}
        self._lock = threading.Lock()

    def slide_ids(self) -> list[str]:
        if not self.slides_dir.is_dir():
            return []
        return sorted(p.parent.name for p in self.slides_dir.glob("*/manifest.json"))

    def bundle(self, slide_id: str) -> SlideBundle | None:
        with self._lock:
            if slide_id not in self._bundles:
                path = self.slides_dir / slide_id
                if not (path / "manifest.json").is_file():
                    return None
                self._bundles[slide_id] = load_bundle(path)
            return self._bundles[slide_id]

    def index(self, bundle: SlideBundle, magnification: int) -> PatchEmbeddingIndex:
        key = (bundle.slide_id, magnification)
        with self._lock:
            if key not in self._indices:
                self._indices[key] = ensure_index(bundle, magnification,
                                                  self.backends.embedder)
            return self._indices[key]


class CreateSessionRequest(BaseModel):
    slide_id: str
    question: str
    options: list[str] | None = None
    config: dict | None = None


class InterventionRequest(BaseModel):
    kind: str
    payload: dict = {}
    author: str = "human"


def _error(status: int, detail) -> JSONResponse:
    return JSONResponse(status_code=status, content={"detail": detail})


def create_app(slides_dir: str | Path, backends: Backends,
               sessions_dir: str | Path,
               session_defaults: SessionConfig | None = None,
               max_sessions: int = DEFAULT_MAX_SESSIONS) -> FastAPI:
    app = FastAPI(title="slideagent service")
    registry = SlideRegistry(slides_dir, backends)
    sessions_dir = Path(sessions_dir)
    sessions_dir.mkdir(parents=True, exist_ok=True)
    defaults = session_defaults or SessionConfig()
    sessions: dict[str, Session] = {}
    sessions_lock = threading.Lock()

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        return _error(400, [{"loc": list(e["loc"]), "msg": e["msg"]} for e in exc.errors()])

    def get_session(session_id: str) -> Session | None:
        with sessions_lock:
            return sessions.get(session_id)

    def active_count() -> int:
        with sessions_lock:
            return sum(1 for s in sessions.values()
                       if s.status not in (STATUS_DONE, STATUS_FAILED))

    def run_detached(session: Session) -> None:
        try:
            session.run()
        except SessionAbortedError:
            logger.warning("session %s failed: %s", session.session_id, session.error)

    # -- sessions ------------------------------------------------------------

    @app.post("/v1/sessions", status_code=201)
    def create_session(body: CreateSessionRequest):
        bundle = registry.bundle(body.slide_id)
        if bundle is None:
            return _error(404, f"unknown slide {body.slide_id!r}")
        if active_count() >= max_sessions:
            return _error(429, "session limit reached")
        try:
            config = SessionConfig.from_dict({**defaults.to_dict(), **(body.config or {})})
        except (TypeError, ValueError) as exc:
            return _error(400, f"invalid config: {exc}")
        try:
            index = registry.index(bundle, config.initial_magnification)
        except BundleError as exc:
            return _error(400, str(exc))
        session = Session(
            bundle, body.question, backends, config, options=body.options,
            index=index, trajectory_path=None)
        session.trajectory_path = sessions_dir / f"{session.session_id}.jsonl"
        with sessions_lock:
            sessions[session.session_id] = session
        if config.interactive:
            try:
                session.advance()  # runs to the pre-sampling pause
            except SessionAbortedError:
                pass
        else:
            threading.Thread(target=run_detached, args=(session,), daemon=True,
                             name=f"session-{session.session_id}").start()
        return session.summary()

    @app.get("/v1/sessions")
    def list_sessions():
        with sessions_lock:
            return [s.summary() for s in sessions.values()]

    @app.get("/v1/sessions/{session_id}")
    def get_session_summary(session_id: str):
        session = get_session(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id!r}")
        return session.summary()

    @app.post("/v1/sessions/{session_id}/resume")
    def resume_session(session_id: str):
        session = get_session(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id!r}")
        if session.status not in (STATUS_PAUSED, STATUS_AWAITING):
            return _error(409, f"session is {session.status}, not paused")
        try:
            session.advance()
        except SessionAbortedError:
            pass  # status=failed is reflected in the summary
        return session.summary()

    @app.post("/v1/sessions/{session_id}/interventions")
    def intervene(session_id: str, body: InterventionRequest):
        session = get_session(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id!r}")
        try:
            return session.apply_intervention(body.kind, body.payload, body.author)
        except SessionStateError as exc:
            return _error(409, str(exc))
        except InterventionError as exc:
            return _error(422, str(exc))

    @app.get("/v1/sessions/{session_id}/trajectory")
    def get_trajectory(session_id: str):
        session = get_session(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id!r}")
        with session._event_cond:
            return list(session.events)

    @app.get("/v1/sessions/{session_id}/events")
    def stream_events(session_id: str, request: Request):
        session = get_session(session_id)
        if session is None:
            return _error(404, f"unknown session {session_id!r}")
        last_seen = -1
        header = request.headers.get("last-event-id")
        if header and header.lstrip("-").isdigit():
            last_seen = int(header)

        def generate():
            cursor = last_seen
            while True:
                fresh = session.wait_events(cursor, timeout=0.2)
                for event in fresh:
                    cursor = event["seq"]
                    yield f"id: {event['seq']}\ndata: {json.dumps(event, sort_keys=True)}\n\n"
                if not fresh and session.status in (STATUS_DONE, STATUS_FAILED):
                    yield "event: end\ndata: {}\n\n"
                    return

        return StreamingResponse(generate(), media_type="text/event-stream",
                                 headers={"Cache-Control": "no-cache"})

    # -- slides ----------------------------------------------------------

    @app.get("/v1/slides")
    def list_slides():
        out = []
        for slide_id in registry.slide_ids():
            bundle = registry.bundle(slide_id)
            if bundle is None:
                continue
            out.append({
                "slide_id": bundle.slide_id,
                "tile_size_px": bundle.tile_size_px,
                "levels": [{"magnification": lv.magnification,
                            "grid_w": lv.grid_w, "grid_h": lv.grid_h}
                           for lv in bundle.levels],
            })
        return out

    @app.get("/v1/slides/{slide_id}/manifest")
    def get_manifest(slide_id: str):
        bundle = registry.bundle(slide_id)
        if bundle is None:
            return _error(404, f"unknown slide {slide_id!r}")
        manifest_path = Path(bundle.root) / "manifest.json"
        return json.loads(manifest_path.read_text(encoding="utf-8"))

    @app.get("/v1/slides/{slide_id}/tiles/{mag}/{col}/{row}")
    def get_tile(slide_id: str, mag: int, col: int, row: int):
        bundle = registry.bundle(slide_id)
        if bundle is None:
            return _error(404, f"unknown slide {slide_id!r}")
        try:
            patch = bundle.patch(mag, col, row)
            data, media = tile_bytes(bundle, patch)
        except (LevelNotFoundError, PatchMismatchError) as exc:
            return _error(404, str(exc))
        except TileReadError as exc:
            return _error(500, str(exc))
        return Response(content=data, media_type=media, headers={
            "Cache-Control": "public, max-age=86400, immutable",
            "ETag": f'"{slide_id}-{mag}-{col}-{row}"',
        })

    return app
