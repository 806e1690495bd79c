"""HTTP service exposing the inference pipeline to the web console.

Endpoints:

- ``GET /patients``: patient ids available for prediction.
- ``GET /patients/{id}/history``: a patient's input history with names.
- ``POST /predict``: run the pipeline for one patient with an optional
  clinician comment; returns codes, explanation, graph, summaries, usage.
- ``GET /runs/{run_id}/metrics``: a persisted run's metrics report.

Error mapping: 400 invalid request, 404 unknown patient or run,
502 provider failure, 500 anything else. Graphs always travel in the
wire format (sorted nodes, sorted edge pairs).
"""

from __future__ import annotations

import json
import logging
import re
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .ehr import Cohort
from .gateway import CompletionProvider, GatewayError
from .pipeline import (
    PipelineContext,
    RunConfig,
    UnknownPatientError,
    predict_single,
)

logger = logging.getLogger(__name__)

_RUN_ID_RE = re.compile(r"^[0-9a-f]{8,64}$")


class PredictRequest(BaseModel):
    patient_id: str
    comment: Optional[str] = None


def create_app(
    cohort: Cohort,
    context: PipelineContext,
    config: RunConfig,
    runs_dir: Optional[str | Path] = None,
    provider: Optional[CompletionProvider] = None,
) -> FastAPI:
    """Build the service around already-loaded assets.

    ``provider`` overrides the config-selected completion provider (used
    by tests to inject scripted doubles). ``runs_dir`` is where persisted
    run directories live, for the metrics endpoint.
    """
    app = FastAPI(title="diagnosis pipeline", docs_url=None, redoc_url=None)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    registry = context.registry
    by_id = {p.patient_id: p for p in cohort.patients}

    @app.exception_handler(RequestValidationError)
    async def _invalid_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": str(exc)})

    @app.get("/patients")
    def list_patients():
        return {"patients": [p.patient_id for p in cohort.patients]}

    @app.get("/patients/{patient_id}/history")
    def patient_history(patient_id: str):
        record = by_id.get(patient_id)
        if record is None:
            return JSONResponse(
                status_code=404, content={"detail": f"unknown patient: {patient_id}"}
            )
        history = sorted(record.history_codes(), key=registry.sort_key)
        return {
            "patient_id": patient_id,
            "history": [{"code": c, "name": registry.name(c)} for c in history],
            "visit_count": len(record.visits),
        }

    @app.post("/predict")
    def predict(request: PredictRequest):
        try:
            artifact = predict_single(
                request.patient_id,
                request.comment,
                cohort,
                context,
                config,
                provider=provider,
            )
        except UnknownPatientError:
            return JSONResponse(
                status_code=404,
                content={"detail": f"unknown patient: {request.patient_id}"},
            )
        if not artifact.succeeded:
            status = 502 if "gateway" in (artifact.stage or "") else 500
            if artifact.error and any(
                name in artifact.error
                for name in ("TransportError", "ProviderRefusal", "ScriptExhausted",
                             "ContextLengthExceeded", "CausalDiscoveryError",
                             "KnowledgeSynthesisError")
            ):
                status = 502
            return JSONResponse(
                status_code=status,
                content={"detail": artifact.error, "stage": artifact.stage},
            )
        graph = artifact.graph.to_wire_dict() if artifact.graph else {"nodes": [], "edges": []}
        summaries = artifact.synthesis.summaries if artifact.synthesis else []
        return {
            "patient_id": artifact.patient_id,
            "codes": list(artifact.prediction.codes),
            "names": {c: registry.name(c) for c in artifact.prediction.codes},
            "explanation": artifact.prediction.explanation,
            "graph": graph,
            "summaries": [[doc_id, text] for doc_id, text in summaries],
            "usage": artifact.usage.to_dict(),
            "comment": request.comment or "",
        }

    @app.get("/runs/{run_id}/metrics")
    def run_metrics(run_id: str):
        if not _RUN_ID_RE.match(run_id):
            return JSONResponse(
                status_code=400, content={"detail": f"malformed run id: {run_id}"}
            )
        if runs_dir is None:
            return JSONResponse(
                status_code=404, content={"detail": "no runs directory configured"}
            )
        metrics_path = Path(runs_dir) / run_id / "metrics.json"
        if not metrics_path.is_file():
            return JSONResponse(
                status_code=404, content={"detail": f"no metrics for run: {run_id}"}
            )
        return json.loads(metrics_path.read_text(encoding="utf-8"))

    @app.exception_handler(GatewayError)
    async def _gateway_failure(request: Request, exc: GatewayError):
        logger.warning("provider failure: %s", exc)
        return JSONResponse(status_code=502, content={"detail": str(exc)})

    @app.exception_handler(Exception)
    async def _internal(request: Request, exc: Exception):
        logger.exception("unhandled service error")
        return JSONResponse(status_code=500, content={"detail": "internal error"})

    return app


def serve(app: FastAPI, host: str = "127.0.0.1", port: int = 8077) -> None:
    """Run the service until interrupted."""
    import uvicorn

    uvicorn.run(app, host=host, port=port, log_level="warning")
