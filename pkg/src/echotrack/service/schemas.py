"""Request/response models for the tracking service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class RunRequest(BaseModel):
    profile: str = "desk"
    seed: int = 0
    methods: Optional[list[str]] = None
    overrides: dict = Field(default_factory=dict)
    out_dir: Optional[str] = None


class RunInfo(BaseModel):
    run_id: str
    state: str  # queued | running | done | failed
    profile: str
    seed: int
    blocks_done: int
    blocks_total: int
    out_dir: str
    error: Optional[str] = None


class RunList(BaseModel):
    runs: list[RunInfo]


class MethodSummary(BaseModel):
    infer_angle_rsse: Optional[float] = None
    infer_dist_rsse: Optional[float] = None
    train_angle_rsse: Optional[float] = None
    train_dist_rsse: Optional[float] = None


class RunResult(BaseModel):
    run_id: str
    state: str
    summary: dict[str, MethodSummary] = Field(default_factory=dict)
    flags: dict[str, int] = Field(default_factory=dict)
    wall_time_s: Optional[float] = None


class BlockSlice(BaseModel):
    run_id: str
    records: list[dict]


class ProfileInfo(BaseModel):
    name: str
    config: dict


class HealthResponse(BaseModel):
    status: str
    version: str
