"""Request and response bodies for the HTTP service."""

from typing import Literal, Optional

from pydantic import BaseModel, Field


class ConfigRequest(BaseModel):
    """Base for endpoints that operate on a saved run config. The optional
    fields override the corresponding config values for this call only."""

    config: str
    seed: Optional[int] = None
    out_dir: Optional[str] = None
    variant: Optional[str] = None

    def overrides(self) -> dict:
        return {"seed": self.seed, "out_dir": self.out_dir, "variant": self.variant}


class IterationRequest(ConfigRequest):
    iteration: int = Field(default=1, ge=1)


class RunRequest(ConfigRequest):
    shot_scaling: bool = True


class SuiteRequest(BaseModel):
    out_dir: str
    seed: int = 17
    train_size: int = Field(default=200, ge=1)
    test_size: int = Field(default=100, ge=1)


class SearchRequest(ConfigRequest):
    query: str
    k: int = Field(default=10, ge=1)
    method: Literal["bm25", "dense"] = "bm25"
    iteration: Optional[int] = Field(default=None, ge=1)


class ScoreRequest(ConfigRequest):
    input_text: str
    output_text: str
    task_id: str
    candidate_ids: list[str]


class ReportRequest(BaseModel):
    config: Optional[str] = None
    out_dir: Optional[str] = None


class HealthResponse(BaseModel):
    status: str
    version: str


class SuiteResponse(BaseModel):
    suite_dir: str
    config_path: str
    pool_files: list[str]
    test_files: list[str]
    task_file: str


class StageResponse(BaseModel):
    stage: str
    iteration: int
    stats: dict


class IterateResponse(BaseModel):
    iteration: int
    manifest: dict


class TaskRow(BaseModel):
    metric: str
    value: float
    count: int
    category: str
    held_out: bool


class ReportModel(BaseModel):
    strategy: str
    k_shots: int
    per_task: dict[str, TaskRow]
    per_category: dict[str, float]
    task_mean: float
    category_mean: float
    held_in_task_mean: float


class EvalResponse(BaseModel):
    reports: dict[str, ReportModel]


class RunResponse(BaseModel):
    executed: list[int]
    reports: dict[str, ReportModel]
    shot_scaling: list[list[str]]
    out_dir: str


class CompareResponse(BaseModel):
    reports: dict[str, ReportModel]
    table: Optional[str] = None
    shot_scaling: Optional[str] = None


class Hit(BaseModel):
    id: str
    score: float


class SearchResponse(BaseModel):
    hits: list[Hit]
    retriever: str


class ScoreResponse(BaseModel):
    entries: list[Hit]
    ranking_depth: int


class ErrorBody(BaseModel):
    kind: Literal["config", "stage"]
    message: str
    stage: Optional[str] = None
