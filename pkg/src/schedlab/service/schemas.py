"""Request and response models shared by the HTTP service and the CLI."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field, model_validator


class TrainRequest(BaseModel):
    config_path: str | None = None
    config_text: str | None = None
    seed: int | None = None
    out_dir: str | None = None

    @model_validator(mode="after")
    def _one_config_source(self) -> "TrainRequest":
        if self.config_path is None and self.config_text is None:
            raise ValueError("provide config_path or config_text")
        if self.config_path is not None and self.config_text is not None:
            raise ValueError("provide only one of config_path / config_text")
        return self


class RunReport(BaseModel):
    mean_accuracy: float
    per_class_accuracy: list[float | None]
    accuracy_std: float
    wall_time_s: float
    steps: int
    scheduler: str
    seed: int


class RunStatus(BaseModel):
    run_id: str
    state: Literal["running", "finished", "failed"]
    out_dir: str
    report: RunReport | None = None
    error: str | None = None


class MetricsPage(BaseModel):
    run_id: str
    offset: int
    lines: list[str]
    total: int


class SuiteRequest(BaseModel):
    config_path: str | None = None
    config_text: str | None = None
    seeds: list[int] = Field(min_length=1)
    schedulers: list[str] = Field(default_factory=list)
    ablations: list[str] = Field(default_factory=list)
    jobs: int = 1
    out_dir: str | None = None

    @model_validator(mode="after")
    def _one_config_source(self) -> "SuiteRequest":
        if self.config_path is None and self.config_text is None:
            raise ValueError("provide config_path or config_text")
        if not self.schedulers and not self.ablations:
            raise ValueError("provide schedulers and/or ablations to compare")
        return self


class SuiteStatus(BaseModel):
    run_id: str
    state: Literal["running", "finished", "failed"]
    out_dir: str
    summary: dict | None = None
    error: str | None = None


class EvalRequest(BaseModel):
    checkpoint: str
    config_path: str | None = None


class EvalResponse(BaseModel):
    mean_accuracy: float
    per_class_accuracy: list[float | None]
    accuracy_std: float
    scenes: int


class DumpStateRequest(BaseModel):
    run_dir: str
    out_path: str | None = None


class DumpStateResponse(BaseModel):
    path: str
    states: int
