"""Request/response bodies of the lab service."""

from __future__ import annotations

from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from ..config import RunConfig


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class HealthResponse(StrictModel):
    status: str
    version: str


# -- prompt pools -----------------------------------------------------------


class PoolRequest(StrictModel):
    world: Union[str, dict] = "rings-8"
    size: int = Field(1600, ge=1)
    vague_fraction: float = Field(0.35, ge=0, lt=1)
    jitter: float = Field(0.1, gt=0)
    seed: int = 0


class PromptEntry(StrictModel):
    id: int
    label: str
    embedding: list[float]


class PoolResponse(StrictModel):
    records: list[PromptEntry]


# -- runs -------------------------------------------------------------------


class RunRequest(StrictModel):
    config: RunConfig
    out_dir: Optional[str] = None
    baseline: Optional[Literal["random", "sft"]] = None
    dry_run: bool = False
    force: bool = False
    resume: bool = False


class RunAccepted(StrictModel):
    run_id: Optional[str] = None
    state: str
    out_dir: Optional[str] = None
    resolved_config: Optional[dict] = None  # populated for dry runs


class RoundRow(StrictModel):
    round: int
    mmd_to_reference: float
    mean_composite: float
    hallucination_rate: float
    mean_alignment: float
    mean_aesthetic: float


class RunStatus(StrictModel):
    run_id: str
    state: Literal["queued", "running", "completed", "failed"]
    kind: str
    out_dir: str
    error: Optional[str] = None
    error_kind: Optional[Literal["config", "runtime"]] = None
    rounds: list[RoundRow] = Field(default_factory=list)


class RunList(StrictModel):
    runs: list[RunStatus]


# -- ablations --------------------------------------------------------------


class AblateRequest(StrictModel):
    config: RunConfig
    parameter: Literal["beta", "sigma_sq", "k_select", "strategy"]
    values: list[Union[float, int, str]]
    seeds: list[int]
    out_dir: str
    force: bool = False


class AblateStatus(StrictModel):
    run_id: str
    state: Literal["queued", "running", "completed", "failed"]
    error: Optional[str] = None
    error_kind: Optional[Literal["config", "runtime"]] = None
    run_dirs: list[str] = Field(default_factory=list)
    csv_path: Optional[str] = None


# -- reports ----------------------------------------------------------------


class ReportRequest(StrictModel):
    run_dirs: list[str]


class ReportResponse(StrictModel):
    csv: str
    svgs: dict[str, str]
    skipped: list[str]
