"""HTTP front for the MUSHRA store.

Routes::

    POST /api/session                         {"test_id": ...}
    GET  /api/session/{sid}/trial/{i}
    POST /api/session/{sid}/trial/{i}/scores  {"scores": {token: int}, "timestamp": float?}
    GET  /api/test/{tid}/aggregate
    GET  /audio/{token}

The rater UI, when present, is served as static files from ``/``.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any

from fastapi import Body, FastAPI, HTTPException
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from .audio_io import WavError, read_wav
from .mushra import (
    AlreadySubmittedError,
    MushraStore,
    ScreeningRule,
    UnknownSessionError,
    UnknownTestError,
    ValidationError,
)


def create_app(data_dir, screening: ScreeningRule | None = None, ui_dir=None) -> FastAPI:
    store = MushraStore(data_dir, screening=screening)
    app = FastAPI(title="MUSHRA listening test")
    app.state.store = store

    def not_found(exc: Exception):
        raise HTTPException(status_code=404, detail=str(exc))

    @app.post("/api/session", status_code=201)
    def create_session(payload: dict[str, Any] = Body(...)):
        test_id = payload.get("test_id")
        if not isinstance(test_id, str):
            raise HTTPException(status_code=422, detail="test_id must be a string")
        try:
            return store.create_session(test_id)
        except UnknownTestError as exc:
            not_found(exc)

    @app.get("/api/session/{session_id}/trial/{index}")
    def get_trial(session_id: str, index: int):
        try:
            return store.get_trial(session_id, index)
        except UnknownSessionError as exc:
            not_found(exc)
        except ValidationError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.post("/api/session/{session_id}/trial/{index}/scores")
    def submit_scores(session_id: str, index: int, payload: dict[str, Any] = Body(...)):
        try:
            return store.submit_scores(session_id, index, payload.get("scores"), payload.get("timestamp"))
        except UnknownSessionError as exc:
            not_found(exc)
        except AlreadySubmittedError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except ValidationError as exc:
            return JSONResponse(status_code=422, content={"detail": str(exc), "token": exc.token})

    @app.get("/api/test/{test_id}/aggregate")
    def aggregate(test_id: str):
        try:
            return store.aggregate(test_id)
        except UnknownTestError as exc:
            not_found(exc)

    @app.get("/audio/{token}")
    def audio(token: str):
        try:
            path = store.audio_path(token)
        except UnknownTestError as exc:
            not_found(exc)
        try:
            read_wav(path)
            blob = Path(path).read_bytes()
        except (OSError, WavError):
            raise HTTPException(status_code=404, detail="stimulus audio unavailable")
        return Response(content=blob, media_type="audio/wav")

    if ui_dir is not None and os.path.isdir(ui_dir):
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    return app
