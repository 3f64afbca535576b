"""HTTP front end over :mod:`selfmod.service`.

Single runs and metric calls answer synchronously. Grids and ablations run
as background jobs polled through ``/jobs/{job_id}``.
"""

from __future__ import annotations

import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from importlib.metadata import PackageNotFoundError, version

import numpy as np
from fastapi import FastAPI, HTTPException

from . import service
from .architectures import ConfigError
from .config import Config
from .harness import jsonable
from .metrics import fid_from_features, prd_curve
from .schemas import (
    AblateRequest,
    FIDRequest,
    FIDResponse,
    GridRequest,
    Health,
    JobAccepted,
    JobStatus,
    MetricsRequest,
    PRDRequest,
    PRDResponse,
    ReportRequest,
    TrainRequest,
    flatten,
)

try:
    __version__ = version("artifact")
except PackageNotFoundError:
    __version__ = "0.0.0"


class JobStore:
    def __init__(self, workers: int = 1):
        self._pool = ThreadPoolExecutor(max_workers=workers)
        self._jobs: dict = {}
        self._lock = threading.Lock()

    def submit(self, kind: str, fn, *args) -> str:
        job_id = uuid.uuid4().hex[:12]
        with self._lock:
            self._jobs[job_id] = {"job_id": job_id, "kind": kind, "state": "queued"}
        self._pool.submit(self._run, job_id, fn, args)
        return job_id

    def _run(self, job_id, fn, args):
        self._update(job_id, state="running")
        try:
            result = jsonable(fn(*args))
        except Exception as exc:  # reported to the client, not raised
            self._update(job_id, state="failed", error=f"{type(exc).__name__}: {exc}")
        else:
            self._update(job_id, state="done", result=result)

    def _update(self, job_id, **kw):
        with self._lock:
            self._jobs[job_id].update(kw)

    def get(self, job_id: str) -> dict:
        with self._lock:
            if job_id not in self._jobs:
                raise KeyError(job_id)
            return dict(self._jobs[job_id])


def _config(values: dict) -> Config:
    try:
        return Config(flatten(values))
    except ConfigError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from None


def _call(fn, *args):
    try:
        return jsonable(fn(*args))
    except (ConfigError, ValueError) as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from None
    except FileNotFoundError as exc:
        raise HTTPException(status_code=404, detail=str(exc)) from None


def create_app(job_workers: int = 1) -> FastAPI:
    app = FastAPI(title="selfmod", version=__version__)
    jobs = JobStore(job_workers)

    @app.get("/health", response_model=Health)
    def health():
        return Health(version=__version__)

    @app.post("/train")
    def train(req: TrainRequest):
        return _call(service.train, _config(req.config), req.seed)

    @app.post("/grid", response_model=JobAccepted, status_code=202)
    def grid(req: GridRequest):
        job_id = jobs.submit("grid", service.grid, _config(req.config))
        return JobAccepted(job_id=job_id, state="queued")

    @app.post("/ablate", response_model=JobAccepted, status_code=202)
    def ablate(req: AblateRequest):
        job_id = jobs.submit("ablate", service.ablate, _config(req.config))
        return JobAccepted(job_id=job_id, state="queued")

    @app.get("/jobs/{job_id}", response_model=JobStatus)
    def job(job_id: str):
        try:
            return JobStatus(**jobs.get(job_id))
        except KeyError:
            raise HTTPException(status_code=404, detail=f"no job {job_id}") from None

    @app.post("/report")
    def report(req: ReportRequest):
        return _call(service.report, req.root, req.out_dir)

    @app.post("/metrics")
    def metrics(req: MetricsRequest):
        return _call(service.evaluate, req.model_path, _config(req.config), req.seed)

    @app.post("/metrics/fid", response_model=FIDResponse)
    def fid(req: FIDRequest):
        return FIDResponse(fid=_call(fid_from_features, np.asarray(req.real), np.asarray(req.fake)))

    @app.post("/metrics/prd", response_model=PRDResponse)
    def prd(req: PRDRequest):
        try:
            r = prd_curve(np.asarray(req.real), np.asarray(req.fake), req.num_clusters,
                          req.num_angles, req.num_runs, req.seed)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from None
        return PRDResponse(f8=r.f8, f_inv8=r.f_inv8, precision=r.precision.tolist(),
                           recall=r.recall.tolist())

    return app


app = create_app()
