from __future__ import annotations

from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field

ConfigValue = Union[str, int, float, bool, List[Union[str, int, float, bool]]]


def flatten(values: Dict[str, ConfigValue]) -> Dict[str, str]:
    """Request config values to the string form used by config files."""
    out = {}
    for k, v in values.items():
        if isinstance(v, list):
            out[k] = ",".join(_scalar(x) for x in v)
        else:
            out[k] = _scalar(v)
    return out


def _scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


class TrainRequest(BaseModel):
    seed: int
    config: Dict[str, ConfigValue] = Field(default_factory=dict)


class GridRequest(BaseModel):
    config: Dict[str, ConfigValue] = Field(default_factory=dict)


class AblateRequest(BaseModel):
    config: Dict[str, ConfigValue] = Field(default_factory=dict)


class ReportRequest(BaseModel):
    root: str
    out_dir: Optional[str] = None


class MetricsRequest(BaseModel):
    model_path: str
    seed: int = 0
    config: Dict[str, ConfigValue] = Field(default_factory=dict)


class FIDRequest(BaseModel):
    real: List[List[float]]
    fake: List[List[float]]


class FIDResponse(BaseModel):
    fid: float


class PRDRequest(BaseModel):
    real: List[List[float]]
    fake: List[List[float]]
    num_clusters: int = 20
    num_angles: int = 1001
    num_runs: int = 10
    seed: int = 0


class PRDResponse(BaseModel):
    f8: float
    f_inv8: float
    precision: List[float]
    recall: List[float]


class JobAccepted(BaseModel):
    job_id: str
    state: Literal["queued", "running", "done", "failed"]


class JobStatus(BaseModel):
    job_id: str
    kind: str
    state: Literal["queued", "running", "done", "failed"]
    result: Optional[Dict[str, Any]] = None
    error: Optional[str] = None


class Health(BaseModel):
    status: str = "ok"
    version: str
