"""FastAPI app: run submission, polling, ablations, pools, reports.

Runs execute on a worker pool owned by the app (capped by
RSILAB_THREADS); status polling reads the run's manifest from disk, so
progress is visible round by round while a job is still executing.
"""

from __future__ import annotations

import json
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from dataclasses import dataclass, field

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import RunConfig
from ..loop import (
    MANIFEST_NAME,
    RunError,
    resume,
    run_ablation,
    run_baseline_random,
    run_baseline_sft,
    run_rsi,
    worker_count,
)
from ..numkit import RngStream
from ..prompts import generate_prompt_pool
from ..reporting import build_report
from ..world import build_world
from .schemas import (
    AblateRequest,
    AblateStatus,
    HealthResponse,
    PoolRequest,
    PoolResponse,
    PromptEntry,
    ReportRequest,
    ReportResponse,
    RoundRow,
    RunAccepted,
    RunList,
    RunRequest,
    RunStatus,
)


@dataclass
class _Job:
    id: str
    kind: str
    out_dir: str
    state: str = "queued"
    error: str | None = None
    error_kind: str | None = None
    result: dict = field(default_factory=dict)


class _Registry:
    def __init__(self):
        self.lock = threading.Lock()
        self.jobs: dict[str, _Job] = {}
        self.counter = 0

    def new(self, kind: str, out_dir: str) -> _Job:
        with self.lock:
            self.counter += 1
            job = _Job(id=f"{kind}-{self.counter:04d}", kind=kind, out_dir=out_dir)
            self.jobs[job.id] = job
            return job


def _classify(exc: Exception) -> str:
    if isinstance(exc, RunError):
        return exc.kind
    if isinstance(exc, (ValueError, FileNotFoundError, json.JSONDecodeError)):
        return "config"
    return "runtime"


def _round_rows(out_dir: str) -> list[RoundRow]:
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        return []
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        rows = []
        for entry in manifest.get("rounds", []):
            with open(os.path.join(out_dir, entry["metrics"])) as mf:
                m = json.load(mf)
            rows.append(RoundRow(
                round=m["round"],
                mmd_to_reference=m["mmd_to_reference"],
                mean_composite=m["mean_composite"],
                hallucination_rate=m["hallucination_rate"],
                mean_alignment=m["mean_alignment"],
                mean_aesthetic=m["mean_aesthetic"],
            ))
        return rows
    except (OSError, KeyError, ValueError):
        return []


def create_app() -> FastAPI:
    registry = _Registry()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        app.state.executor = ThreadPoolExecutor(max_workers=worker_count())
        try:
            yield
        finally:
            app.state.executor.shutdown(wait=True)

    app = FastAPI(title="rsilab", version=__version__, lifespan=lifespan)
    app.state.registry = registry

    def submit(job: _Job, fn, *args, **kwargs) -> None:
        def _work():
            job.state = "running"
            try:
                job.result = fn(*args, **kwargs) or {}
                job.state = "completed"
            except Exception as exc:  # job errors surface via polling
                job.state = "failed"
                job.error = str(exc)
                job.error_kind = _classify(exc)

        app.state.executor.submit(_work)

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/pools", response_model=PoolResponse)
    def make_pool(req: PoolRequest) -> PoolResponse:
        try:
            world = build_world(req.world)
            pool = generate_prompt_pool(
                world, req.size, req.vague_fraction,
                RngStream(req.seed).child("pool"), jitter=req.jitter,
            )
        except (ValueError, KeyError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return PoolResponse(records=[
            PromptEntry(id=c.id, label=c.label, embedding=c.embedding.tolist())
            for c in pool
        ])

    @app.post("/runs", response_model=RunAccepted)
    def submit_run(req: RunRequest) -> RunAccepted:
        out_dir = req.out_dir or req.config.output_dir
        if req.dry_run:
            return RunAccepted(state="validated", out_dir=out_dir,
                               resolved_config=req.config.model_dump())
        if not out_dir:
            raise HTTPException(
                status_code=422,
                detail="no output directory: set output_dir in the config or pass out_dir",
            )
        if req.resume:
            if req.baseline:
                raise HTTPException(status_code=422, detail="resume applies to the stored kind")
            job = registry.new("resume", out_dir)
            submit(job, resume, out_dir, req.config)
        elif req.baseline == "random":
            job = registry.new("random", out_dir)
            submit(job, run_baseline_random, req.config, out_dir, force=req.force)
        elif req.baseline == "sft":
            job = registry.new("sft", out_dir)
            submit(job, run_baseline_sft, req.config, out_dir, force=req.force)
        else:
            job = registry.new("run", out_dir)
            submit(job, run_rsi, req.config, out_dir, force=req.force)
        return RunAccepted(run_id=job.id, state=job.state, out_dir=out_dir)

    def _status(job: _Job) -> RunStatus:
        return RunStatus(
            run_id=job.id,
            state=job.state,  # type: ignore[arg-type]
            kind=job.kind,
            out_dir=job.out_dir,
            error=job.error,
            error_kind=job.error_kind,  # type: ignore[arg-type]
            rounds=_round_rows(job.out_dir),
        )

    @app.get("/runs", response_model=RunList)
    def list_runs() -> RunList:
        with registry.lock:
            jobs = [j for j in registry.jobs.values() if j.kind != "ablation"]
        return RunList(runs=[_status(j) for j in jobs])

    @app.get("/runs/{run_id}", response_model=RunStatus)
    def run_status(run_id: str) -> RunStatus:
        job = registry.jobs.get(run_id)
        if job is None or job.kind == "ablation":
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        return _status(job)

    @app.post("/ablate", response_model=AblateStatus)
    def submit_ablation(req: AblateRequest) -> AblateStatus:
        job = registry.new("ablation", req.out_dir)
        submit(job, run_ablation, req.config, req.parameter, list(req.values),
               list(req.seeds), req.out_dir, force=req.force)
        return AblateStatus(run_id=job.id, state=job.state)  # type: ignore[arg-type]

    @app.get("/ablate/{run_id}", response_model=AblateStatus)
    def ablation_status(run_id: str) -> AblateStatus:
        job = registry.jobs.get(run_id)
        if job is None or job.kind != "ablation":
            raise HTTPException(status_code=404, detail=f"unknown ablation {run_id}")
        return AblateStatus(
            run_id=job.id,
            state=job.state,  # type: ignore[arg-type]
            error=job.error,
            error_kind=job.error_kind,  # type: ignore[arg-type]
            run_dirs=list(job.result.get("runs", [])),
            csv_path=job.result.get("csv"),
        )

    @app.post("/reports", response_model=ReportResponse)
    def make_report(req: ReportRequest) -> ReportResponse:
        try:
            csv_text, svgs, skipped = build_report(req.run_dirs)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return ReportResponse(csv=csv_text, svgs=svgs, skipped=skipped)

    return app
