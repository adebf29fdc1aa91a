"""FastAPI service wrapping the tracking workbench: submit episode runs,
poll progress, and fetch summaries or per-block records."""

from __future__ import annotations

import json
import tempfile
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..errors import ConfigError, EchoTrackError
from ..tracker import profile_config, run_episode
from .schemas import (
    BlockSlice,
    HealthResponse,
    ProfileInfo,
    RunInfo,
    RunList,
    RunRequest,
    RunResult,
)


@dataclass
class _Run:
    run_id: str
    profile: str
    seed: int
    out_dir: str
    blocks_total: int
    state: str = "queued"
    blocks_done: int = 0
    error: str | None = None
    manifest: dict | None = None
    thread: threading.Thread | None = None


class RunRegistry:
    def __init__(self):
        self._runs: dict[str, _Run] = {}
        self._lock = threading.Lock()

    def submit(self, req: RunRequest) -> _Run:
        overrides = dict(req.overrides)
        overrides["seed"] = req.seed
        if req.methods is not None:
            overrides["methods"] = tuple(req.methods)
        config = profile_config(req.profile, **overrides)
        run_id = uuid.uuid4().hex[:12]
        out_dir = req.out_dir or str(Path(tempfile.gettempdir()) / "echotrack-runs" / run_id)
        run = _Run(
            run_id=run_id,
            profile=req.profile,
            seed=req.seed,
            out_dir=out_dir,
            blocks_total=config.n_blocks,
        )

        def work():
            run.state = "running"
            try:
                manifest = run_episode(
                    config,
                    out_dir,
                    progress_cb=lambda done, total: setattr(run, "blocks_done", done),
                )
                run.manifest = manifest
                run.state = "done"
            except EchoTrackError as exc:
                run.error = f"{type(exc).__name__}: {exc}"
                run.state = "failed"

        run.thread = threading.Thread(target=work, daemon=True)
        with self._lock:
            self._runs[run_id] = run
        run.thread.start()
        return run

    def get(self, run_id: str) -> _Run:
        with self._lock:
            if run_id not in self._runs:
                raise KeyError(run_id)
            return self._runs[run_id]

    def all(self) -> list[_Run]:
        with self._lock:
            return list(self._runs.values())


def _info(run: _Run) -> RunInfo:
    return RunInfo(
        run_id=run.run_id,
        state=run.state,
        profile=run.profile,
        seed=run.seed,
        blocks_done=run.blocks_done,
        blocks_total=run.blocks_total,
        out_dir=run.out_dir,
        error=run.error,
    )


def create_app() -> FastAPI:
    app = FastAPI(title="echotrack", version=__version__)
    registry = RunRegistry()
    app.state.registry = registry

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.get("/profiles", response_model=list[ProfileInfo])
    def profiles():
        return [
            ProfileInfo(name=name, config=profile_config(name).to_dict())
            for name in ("desk", "paper")
        ]

    @app.post("/runs", response_model=RunInfo, status_code=201)
    def submit_run(req: RunRequest):
        try:
            return _info(registry.submit(req))
        except ConfigError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.get("/runs", response_model=RunList)
    def list_runs():
        return RunList(runs=[_info(r) for r in registry.all()])

    @app.get("/runs/{run_id}", response_model=RunInfo)
    def run_status(run_id: str):
        try:
            return _info(registry.get(run_id))
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown run id")

    @app.get("/runs/{run_id}/result", response_model=RunResult)
    def run_result(run_id: str):
        try:
            run = registry.get(run_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown run id")
        if run.state != "done" or run.manifest is None:
            return RunResult(run_id=run_id, state=run.state)
        return RunResult(
            run_id=run_id,
            state=run.state,
            summary=run.manifest["summary"],
            flags=run.manifest["flags"],
            wall_time_s=run.manifest["wall_time_s"],
        )

    @app.get("/runs/{run_id}/blocks", response_model=BlockSlice)
    def run_blocks(run_id: str, start: int = 1, end: int | None = None):
        try:
            run = registry.get(run_id)
        except KeyError:
            raise HTTPException(status_code=404, detail="unknown run id")
        path = Path(run.out_dir) / "blocks.jsonl"
        if not path.exists():
            return BlockSlice(run_id=run_id, records=[])
        records = []
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                if rec["block"] < start:
                    continue
                if end is not None and rec["block"] > end:
                    break
                records.append(rec)
        return BlockSlice(run_id=run_id, records=records)

    return app


app = create_app()
