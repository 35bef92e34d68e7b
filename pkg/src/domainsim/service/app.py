"""Local HTTP service for the perturbation-analysis loop.

Wraps a loaded ensemble behind JSON endpoints; classification requests
may run concurrently (checkpoints are read-only), while session appends
are serialized by the store.  Client errors return 400 with a
machine-readable code and message.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles

from ..probe import (
    EnsembleHandle,
    ProbeError,
    ProbeResult,
    SessionClosedError,
    SessionStore,
    UnknownSessionError,
    classify_probe,
)
from .schemas import (
    EnsembleInfoResponse,
    ProbeRequest,
    ProbeResponse,
    SessionCreateResponse,
    SessionResponse,
    StepRequest,
    StepResponse,
)


def _error_code(exc: ProbeError) -> str:
    if isinstance(exc, UnknownSessionError):
        return "unknown_session"
    if isinstance(exc, SessionClosedError):
        return "session_closed"
    return "probe_error"


def _probe_response(result: ProbeResult) -> ProbeResponse:
    return ProbeResponse(**result.to_dict())


def create_app(
    handle: EnsembleHandle,
    session_store: SessionStore,
    static_dir: str | Path | None = None,
) -> FastAPI:
    app = FastAPI(title="domainsim probe service", version="0.1.0")

    @app.exception_handler(ProbeError)
    async def probe_error_handler(request: Request, exc: ProbeError):
        return JSONResponse(
            status_code=400,
            content={"code": _error_code(exc), "message": str(exc)},
        )

    @app.post("/api/probe", response_model=ProbeResponse)
    def probe(req: ProbeRequest) -> ProbeResponse:
        result = classify_probe(handle, req.q1, req.q2, req.expected)
        return _probe_response(result)

    @app.post("/api/sessions", response_model=SessionCreateResponse)
    def create_session() -> SessionCreateResponse:
        session = session_store.create()
        return SessionCreateResponse(session_id=session.session_id)

    @app.post("/api/sessions/{session_id}/steps", response_model=StepResponse)
    def append_step(session_id: str, req: StepRequest) -> StepResponse:
        session_store.get(session_id)  # 400 on unknown id before classifying
        result = classify_probe(handle, req.q1, req.q2, req.expected)
        step = session_store.append(session_id, result, note=req.note)
        return StepResponse(
            timestamp=step.timestamp,
            q1=step.q1,
            q2=step.q2,
            expected=step.expected,
            note=step.note,
            result=_probe_response(step.result),
        )

    @app.get("/api/sessions/{session_id}", response_model=SessionResponse)
    def get_session(session_id: str) -> SessionResponse:
        session = session_store.get(session_id)
        return SessionResponse(
            session_id=session.session_id,
            closed=session.closed,
            steps=[
                StepResponse(
                    timestamp=s.timestamp,
                    q1=s.q1,
                    q2=s.q2,
                    expected=s.expected,
                    note=s.note,
                    result=_probe_response(s.result),
                )
                for s in session.steps
            ],
        )

    @app.get("/api/sessions/{session_id}/file")
    def get_session_file(session_id: str) -> Response:
        raw = session_store.raw_bytes(session_id)
        return Response(
            content=raw,
            media_type="application/jsonl",
            headers={
                "Content-Disposition":
                    f'attachment; filename="session-{session_id}.jsonl"'
            },
        )

    @app.post("/api/sessions/{session_id}/close", response_model=SessionResponse)
    def close_session(session_id: str) -> SessionResponse:
        session_store.close(session_id)
        return get_session(session_id)

    @app.get("/api/ensemble", response_model=EnsembleInfoResponse)
    def ensemble_info() -> EnsembleInfoResponse:
        report = handle.report
        return EnsembleInfoResponse(
            condition=handle.condition,
            k=handle.k,
            consistency_threshold=handle.consistency_threshold,
            vocab_size=handle.vocab.size,
            mean_accuracy=report.mean_accuracy if report else None,
            std_accuracy=report.std_accuracy if report else None,
            models=handle.provenance_summaries(),
        )

    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="console")

    return app
