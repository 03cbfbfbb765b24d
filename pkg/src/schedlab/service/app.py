"""HTTP service wrapping the training laboratory.

Training and suite runs execute as background jobs keyed by run id;
evaluation and state dumps answer synchronously. Pass ``wait=true`` on the
launch endpoints to block until the job finishes (handy for scripts and
tests).
"""

from __future__ import annotations

import itertools
import threading
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..metrics import HEADER
from .handlers import handle_dump_state, handle_eval, handle_suite, handle_train
from .schemas import (
    DumpStateRequest,
    DumpStateResponse,
    EvalRequest,
    EvalResponse,
    MetricsPage,
    RunStatus,
    SuiteRequest,
    SuiteStatus,
    TrainRequest,
)


class _Job:
    def __init__(self, run_id: str, out_dir: str):
        self.run_id = run_id
        self.out_dir = out_dir
        self.state = "running"
        self.payload = None
        self.error: str | None = None
        self.thread: threading.Thread | None = None


def create_app(runs_root: str | Path = "schedlab_runs") -> FastAPI:
    app = FastAPI(title="schedlab", version=__version__)
    runs_root = Path(runs_root)
    jobs: dict[str, _Job] = {}
    counter = itertools.count(1)
    lock = threading.Lock()

    def new_job(kind: str, out_dir: str | None) -> _Job:
        with lock:
            run_id = f"{kind}-{next(counter):04d}"
        job = _Job(run_id, out_dir or str(runs_root / run_id))
        jobs[run_id] = job
        return job

    def launch(job: _Job, target) -> None:
        def body() -> None:
            try:
                job.payload = target()
                job.state = "finished"
            except Exception as exc:
                job.error = str(exc)
                job.state = "failed"

        job.thread = threading.Thread(target=body, daemon=True)
        job.thread.start()

    def train_status(job: _Job) -> RunStatus:
        return RunStatus(run_id=job.run_id, state=job.state,
                         out_dir=job.out_dir, report=job.payload,
                         error=job.error)

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "version": __version__}

    @app.post("/runs", response_model=RunStatus)
    def start_run(request: TrainRequest, wait: bool = False) -> RunStatus:
        job = new_job("train", request.out_dir)
        request = request.model_copy(update={"out_dir": job.out_dir})

        def target():
            report, _ = handle_train(request)
            return report

        launch(job, target)
        if wait:
            job.thread.join()
        return train_status(job)

    @app.get("/runs", response_model=list[RunStatus])
    def list_runs() -> list[RunStatus]:
        return [train_status(job) for run_id, job in sorted(jobs.items())
                if run_id.startswith("train-")]

    def get_job(run_id: str) -> _Job:
        if run_id not in jobs:
            raise HTTPException(status_code=404,
                                detail=f"unknown run {run_id!r}")
        return jobs[run_id]

    @app.get("/runs/{run_id}", response_model=RunStatus)
    def run_status(run_id: str) -> RunStatus:
        return train_status(get_job(run_id))

    @app.get("/runs/{run_id}/metrics", response_model=MetricsPage)
    def run_metrics(run_id: str, offset: int = 0,
                    limit: int = 1000) -> MetricsPage:
        job = get_job(run_id)
        path = Path(job.out_dir) / "metrics.txt"
        if not path.is_file():
            raise HTTPException(status_code=404,
                                detail=f"run {run_id!r} has no metrics yet")
        lines = [line for line in path.read_text().splitlines()
                 if line and line != HEADER]
        return MetricsPage(run_id=run_id, offset=offset,
                           lines=lines[offset:offset + limit],
                           total=len(lines))

    @app.post("/suite", response_model=SuiteStatus)
    def start_suite(request: SuiteRequest, wait: bool = False) -> SuiteStatus:
        job = new_job("suite", request.out_dir)
        request = request.model_copy(update={"out_dir": job.out_dir})

        def target():
            result, _ = handle_suite(request)
            return result.to_dict()

        launch(job, target)
        if wait:
            job.thread.join()
        return SuiteStatus(run_id=job.run_id, state=job.state,
                           out_dir=job.out_dir, summary=job.payload,
                           error=job.error)

    @app.get("/suite/{run_id}", response_model=SuiteStatus)
    def suite_status(run_id: str) -> SuiteStatus:
        job = get_job(run_id)
        return SuiteStatus(run_id=job.run_id, state=job.state,
                           out_dir=job.out_dir, summary=job.payload,
                           error=job.error)

    @app.post("/eval", response_model=EvalResponse)
    def run_eval(request: EvalRequest) -> EvalResponse:
        try:
            return handle_eval(request)
        except (ValueError, FileNotFoundError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.post("/dump-state", response_model=DumpStateResponse)
    def dump_state(request: DumpStateRequest) -> DumpStateResponse:
        try:
            return handle_dump_state(request)
        except (ValueError, FileNotFoundError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    return app
