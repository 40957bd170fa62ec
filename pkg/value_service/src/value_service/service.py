"""HTTP serving: POST /score {messages} -> {"value": r}, GET /healthz.

The request/response shapes match the value-estimator contract consumed by
the search engine's gateway client.
"""

from __future__ import annotations

import logging
from typing import List

from fastapi import FastAPI, HTTPException
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .model import ValueScorer

log = logging.getLogger(__name__)


class ScoreMessage(BaseModel):
    role: str
    content: str


class ScoreRequest(BaseModel):
    messages: List[ScoreMessage] = Field(min_length=1)


class ScoreResponse(BaseModel):
    value: float


def create_app(scorer: ValueScorer) -> FastAPI:
    app = FastAPI(title="value-service")

    @app.exception_handler(RequestValidationError)
    def malformed_request(request, exc: RequestValidationError) -> JSONResponse:
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    @app.post("/score", response_model=ScoreResponse)
    def score(request: ScoreRequest) -> ScoreResponse:
        try:
            value = scorer.score([m.model_dump() for m in request.messages])
        except Exception as exc:  # noqa: BLE001 - map scoring faults to HTTP 500
            log.exception("scoring failed")
            raise HTTPException(status_code=500, detail=str(exc)) from exc
        return ScoreResponse(value=value)

    return app


def serve(artifact_dir, host: str = "0.0.0.0", port: int = 8001) -> None:
    import uvicorn

    scorer = ValueScorer.from_artifact(artifact_dir)
    uvicorn.run(create_app(scorer), host=host, port=port)
