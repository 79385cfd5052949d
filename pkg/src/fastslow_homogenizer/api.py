"""
Fast-Slow Homogenizer service

This module exposes the simulation pipelines and the invariant check suite
over HTTP with FastAPI. Runs are CPU bound and execute in the threadpool.
"""

import logging
from typing import List, Literal, Optional, Union

from fastapi import FastAPI
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__
from .analysis import run_check_suite
from .config import API_HOST, API_PORT, BUILTIN_PREFIX, LOG_LEVEL
from .errors import FastSlowError, ModelError
from .integrator import aligned_step
from .model import ModelConfig, ModelSpec, load_model, parse_model
from .systems import run_full, run_homogenized, run_second_order, run_transformed

logging.basicConfig(level=LOG_LEVEL)
logger = logging.getLogger(__name__)

SERVICE_NAME = "fastslow-homogenizer"

app = FastAPI(
    title="Fast-Slow Homogenizer",
    description="Full, homogenized and second-order dynamics of fast-slow Hamiltonian systems",
    version=__version__,
)


class SimulateRequest(BaseModel):
    model: Union[str, ModelConfig] = "builtin:test"
    pipeline: Literal["full", "transformed", "homog", "second"] = "homog"
    eps: float = Field(default=0.125, gt=0)
    dt: float = Field(gt=0)
    T: Optional[float] = Field(default=None, gt=0)
    output_stride: int = Field(default=1, ge=1)


class SimulateResponse(BaseModel):
    columns: List[str]
    rows: List[List[float]]


class CheckRequest(BaseModel):
    model: Union[str, ModelConfig] = "builtin:test"
    T: float = Field(default=1.0, gt=0)
    eps: float = Field(default=0.125, gt=0)


def resolve_model(reference: Union[str, ModelConfig]) -> ModelSpec:
    """Builtin references only; the service never reads config files from disk."""
    if isinstance(reference, ModelConfig):
        return parse_model(reference.model_dump_json())
    if not reference.startswith(BUILTIN_PREFIX):
        raise ModelError(f"model must be an inline config or {BUILTIN_PREFIX}<name>, got {reference!r}")
    try:
        return load_model(reference)
    except ValueError as exc:
        raise ModelError(str(exc)) from exc


def simulate(request: SimulateRequest) -> SimulateResponse:
    model = resolve_model(request.model)
    T = model.T if request.T is None else request.T
    dt = aligned_step(T, request.dt)
    if request.pipeline == "full":
        traj = run_full(model, request.eps, dt, T, request.output_stride)
    elif request.pipeline == "transformed":
        traj = run_transformed(model, request.eps, dt, T, request.output_stride)
    elif request.pipeline == "homog":
        traj = run_homogenized(model, dt, T, request.output_stride)
    else:
        traj = run_second_order(model, request.eps, dt, T, request.output_stride)
    rows = [[float(t), *map(float, state)] for t, state in zip(traj.times, traj.states)]
    return SimulateResponse(columns=["t", *traj.labels], rows=rows)


def _error_response(exc: FastSlowError) -> JSONResponse:
    status = 422 if isinstance(exc, (ModelError, ValueError)) else 500
    if status == 500:
        logger.exception(f"Request failed: {exc}")
    else:
        logger.warning(f"Rejected request: {exc}")
    return JSONResponse(status_code=status, content={"error": str(exc), "type": type(exc).__name__})


@app.post("/simulate")
async def handle_simulate(request: SimulateRequest):
    """
    Integrate one pipeline.

    Args:
        request: model reference or inline config, pipeline and step settings

    Returns:
        Column names and sampled rows, or an error payload
    """
    logger.info(f"Simulate request: pipeline={request.pipeline}, eps={request.eps}, dt={request.dt}")
    try:
        return await run_in_threadpool(simulate, request)
    except FastSlowError as exc:
        return _error_response(exc)


@app.post("/check")
async def handle_check(request: CheckRequest):
    """Run the invariant check suite and return its report."""
    logger.info(f"Check request: T={request.T}, eps={request.eps}")
    try:
        model = resolve_model(request.model)
        return await run_in_threadpool(run_check_suite, model, request.T, request.eps)
    except FastSlowError as exc:
        return _error_response(exc)


@app.get("/health")
async def health_check():
    """
    Health check endpoint to verify the service is running.

    Returns:
        Status information about the service
    """
    return {"status": "healthy", "service": SERVICE_NAME, "version": __version__}


@app.get("/")
async def root():
    return {
        "name": "Fast-Slow Homogenizer",
        "version": __version__,
        "endpoints": {
            "/simulate": "POST - Integrate the full, transformed, homogenized or second-order system",
            "/check": "POST - Run the invariant check suite",
            "/health": "GET - Check the health of the service",
        },
        "documentation": "/docs",
    }


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(app, host=API_HOST, port=API_PORT)
