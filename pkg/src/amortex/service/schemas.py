"""Request/response models shared by the HTTP service and the CLI."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, ConfigDict, Field


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class HealthResponse(StrictModel):
    status: str
    version: str


class CatalogResponse(StrictModel):
    variants: dict[str, dict]
    covariate_models: dict[str, list]
    presets: list[str]
    scenarios: dict[int, tuple[int, int]]


class SimulateRequest(StrictModel):
    variant: str = "D4"
    covmodel: str = "M3"
    seed: int = 0
    n: int = Field(default=100, ge=1)
    d1: int = Field(default=4, ge=1)
    d2: int = Field(default=4, ge=1)
    extra_covariates: int = Field(default=1, ge=0)
    true_params: dict[str, float]
    censor_level: Optional[float] = None
    out_dir: Optional[str] = None
    start_date: str = "2015-09-01"


class SimulateResponse(StrictModel):
    rows: int
    sites: list[str]
    panel_file: Optional[str] = None
    sites_file: Optional[str] = None
    thresholds: Optional[list[float]] = None
    preview: list[list[float]]


class GridSpec(StrictModel):
    d1: int = Field(ge=1)
    d2: int = Field(ge=1)
    extra_covariates: int = Field(default=1, ge=0)


class TrainRequest(StrictModel):
    variant: str = "D4"
    covmodel: str = "M3"
    seed: int = 0
    n: int = Field(default=100, ge=2)
    sites_file: Optional[str] = None
    grid: Optional[GridSpec] = None
    train: dict = Field(default_factory=dict)
    censor_level: float = 0.75
    out_dir: str


class TrainResponse(StrictModel):
    ralpha_checkpoint: str
    rx_checkpoint: str
    checkpoint_hashes: dict[str, str]
    final_heldout_loss: dict[str, float]
    batches_run: dict[str, int]


class GibbsRequest(StrictModel):
    ralpha_checkpoint: str
    rx_checkpoint: str
    observations_file: str
    months: Optional[list[int]] = None
    censor_level: float = 0.75
    n_iter: int = Field(default=1000, ge=0)
    chains: int = Field(default=1, ge=1)
    seeds: Optional[list[int]] = None
    seed: int = 0
    out_dir: str


class GibbsResponse(StrictModel):
    chain_files: list[str]
    meta_files: list[str]
    param_names: list[str]
    posterior_means: dict[str, float]


class DiagnoseRequest(StrictModel):
    chain_files: list[str]
    burn_in: int = Field(default=0, ge=0)
    truth: Optional[dict[str, float]] = None
    wall_minutes: Optional[float] = None
    ralpha_checkpoint: Optional[str] = None
    rx_checkpoint: Optional[str] = None
    observations_file: Optional[str] = None
    months: Optional[list[int]] = None
    censor_level: float = 0.75
    c_u: int = Field(default=75, ge=0, lt=99)
    posterior_draws: int = Field(default=50, ge=1)
    return_periods: list[float] = Field(default_factory=lambda: [2, 5, 10, 25])
    season_days: int = 122
    out_dir: Optional[str] = None


class DiagnoseResponse(StrictModel):
    report: dict
    timing: dict
    files: list[str]


class ExperimentRequest(StrictModel):
    config: Optional[dict] = None
    preset: Optional[str] = None
    seed: Optional[int] = None
    out_dir: Optional[str] = None
    sites_file: Optional[str] = None
    observations_file: Optional[str] = None


class ExperimentResponse(StrictModel):
    artifact_dir: str
    artifacts: dict[str, str]
    volatile: list[str]
    dataset_metrics: dict


class CompareRequest(StrictModel):
    result_dirs: list[str]
    criterion: str = "mqae"
    split: str = "train"


class CompareResponse(StrictModel):
    ranking: list[dict]


class ErrorBody(StrictModel):
    error: str
    code: int
    message: str
