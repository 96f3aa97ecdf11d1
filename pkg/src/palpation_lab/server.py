"""HTTP JSON API over the session store.

Endpoints (all JSON unless noted):

    POST /sessions                      {phantom: {...}, search: {...}} -> {id, status}
    GET  /sessions                      list of session summaries
    POST /sessions/{id}/register        {synthesize?, points?, ply_path?, init?, icp?}
    PUT  /sessions/{id}/roi             ROI document -> grid summary
    POST /sessions/{id}/run             {mode: "step"|"continuous", max_steps?}
    POST /sessions/{id}/pause
    POST /sessions/{id}/stop
    GET  /sessions/{id}/state?what=summary|grid|probes|registration|heatmap|blended
    GET  /sessions/{id}/heatmap.png?kind=heatmap|blended&opacity=0..1   (image/png)
    GET  /sessions/{id}/events?from_step=0       Server-Sent Events, one step per event
    GET  /sessions/{id}/export          replayable archive
    POST /sessions/import               archive -> {id, status}

Error mapping: not-found -> 404, state-machine violations and exhausted
budgets -> 409, bad input -> 422.
"""

from __future__ import annotations

import json
import queue

from fastapi import Body, FastAPI, Query, Request, Response
from fastapi.responses import JSONResponse, StreamingResponse

from .errors import (
    ArchiveError,
    BudgetExhausted,
    InvalidSessionState,
    PalpationError,
    SearchComplete,
    SessionNotFound,
)
from .search import ROI
from .session import SessionStore


def create_app(store: SessionStore | None = None) -> FastAPI:
    store = store or SessionStore()
    app = FastAPI(title="palpation-lab", version="0.1.0")
    app.state.store = store

    @app.exception_handler(PalpationError)
    def _domain_error(_request: Request, exc: PalpationError):
        if isinstance(exc, SessionNotFound):
            code = 404
        elif isinstance(exc, (InvalidSessionState, BudgetExhausted, SearchComplete)):
            code = 409
        elif isinstance(exc, ArchiveError):
            code = 400
        else:
            code = 422
        return JSONResponse(status_code=code, content={"error": type(exc).__name__, "detail": str(exc)})

    @app.post("/sessions")
    def create_session(body: dict = Body(...)):
        session = store.create(body.get("phantom", {}), body.get("search", {}))
        return {"id": session.id, "status": session.status}

    @app.get("/sessions")
    def list_sessions():
        return {"sessions": store.list()}

    @app.post("/sessions/import")
    def import_session(body: dict = Body(...)):
        session = store.import_archive(body)
        return {"id": session.id, "status": session.status, "steps_taken": len(session.step_log)}

    @app.get("/sessions/{session_id}")
    def session_summary(session_id: str):
        return store.get(session_id).summary()

    @app.post("/sessions/{session_id}/register")
    def register(session_id: str, body: dict | None = Body(None)):
        return store.get(session_id).register(body or {})

    @app.put("/sessions/{session_id}/roi")
    def set_roi(session_id: str, body: dict = Body(...)):
        return store.get(session_id).set_roi(ROI.from_json_dict(body))

    @app.post("/sessions/{session_id}/run")
    def run(session_id: str, body: dict | None = Body(None)):
        body = body or {}
        mode = body.get("mode", "step")
        session = store.get(session_id)
        if mode == "step":
            entry = session.run_step()
            return {"status": session.status, "step": entry}
        if mode == "continuous":
            max_steps = body.get("max_steps")
            return session.run_continuous(int(max_steps) if max_steps is not None else None)
        return JSONResponse(status_code=422, content={"error": "ConfigError", "detail": f"unknown mode {mode!r}"})

    @app.post("/sessions/{session_id}/pause")
    def pause(session_id: str):
        return store.get(session_id).pause()

    @app.post("/sessions/{session_id}/stop")
    def stop(session_id: str):
        return store.get(session_id).stop()

    @app.get("/sessions/{session_id}/state")
    def state(
        session_id: str,
        what: str = Query("summary"),
        opacity: float = Query(1.0, ge=0.0, le=1.0),
    ):
        return store.get(session_id).state(what, opacity=opacity)

    @app.get("/sessions/{session_id}/heatmap.png")
    def heatmap_png(
        session_id: str,
        kind: str = Query("heatmap"),
        opacity: float = Query(1.0, ge=0.0, le=1.0),
    ):
        png = store.get(session_id).heatmap_png(what=kind, opacity=opacity)
        return Response(content=png, media_type="image/png")

    @app.get("/sessions/{session_id}/export")
    def export(session_id: str):
        return store.get(session_id).export()

    @app.get("/sessions/{session_id}/events")
    def events(session_id: str, from_step: int = Query(0, ge=0)):
        session = store.get(session_id)
        replay, live = session.subscribe(from_step=from_step)

        def stream():
            try:
                terminal = False
                for event in replay:
                    yield _sse(event)
                    terminal = terminal or _is_terminal(event)
                while not terminal:
                    try:
                        event = live.get(timeout=15.0)
                    except queue.Empty:
                        yield ": keep-alive\n\n"
                        continue
                    yield _sse(event)
                    terminal = _is_terminal(event)
            finally:
                session.unsubscribe(live)

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app


def _sse(event: dict) -> str:
    return f"event: {event['event']}\ndata: {json.dumps(event['data'])}\n\n"


def _is_terminal(event: dict) -> bool:
    return event.get("event") == "status" and event.get("data", {}).get("status") == "complete"


app = create_app()
