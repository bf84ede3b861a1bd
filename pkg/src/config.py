"""
Validated configuration models for training, sampling and experiments.

All models are pydantic; ``cotlab schema`` writes their JSON schemas so
config files can be checked outside of Python.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, Literal, Optional, Type, TypeVar

import orjson
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator

from .errors import ConfigError

SCHEMA_VERSION = 1

ModelT = TypeVar("ModelT", bound=BaseModel)


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class SampleConfig(_Config):
    """Stopping rule of the quasi-Newton inversion."""

    tol: float = Field(1e-6, gt=0.0, description="Gradient-norm stopping threshold")
    max_iter: int = Field(200, ge=1, description="Maximum quasi-Newton iterations")
    history: int = Field(10, ge=1, description="Number of stored curvature pairs")


class PcpTrainConfig(_Config):
    batch_size: int = Field(64, ge=1, description="Minibatch size")
    learning_rate: float = Field(1e-3, gt=0.0, description="Adam step size")
    epochs: int = Field(50, ge=0, description="Maximum number of passes over the training split")
    depth: int = Field(3, ge=2, description="PICNN depth K")
    width: int = Field(64, ge=1, description="PICNN feature width w")
    context_width: Optional[int] = Field(None, ge=1, description="Context width u; defaults from w and m")
    seed: int = Field(0, description="Initialization and shuffling seed")
    val_interval: int = Field(20, ge=1, description="Optimizer steps between validation checks")
    patience: int = Field(10, ge=1, description="Validation checks without improvement before stopping")
    val_batch: int = Field(2048, ge=1, description="Rows per validation evaluation chunk")
    joint: bool = Field(False, description="Also learn a FICNN potential for y (joint density)")
    ficnn_width: Optional[int] = Field(None, ge=1, description="FICNN width, defaults to width")
    ficnn_depth: Optional[int] = Field(None, ge=2, description="FICNN depth, defaults to depth")
    sampling: SampleConfig = Field(default_factory=SampleConfig)


class FlowConfig(_Config):
    nt: int = Field(8, ge=1, description="RK4 steps during training")
    nt_eval: Optional[int] = Field(None, ge=1, description="RK4 steps for evaluation and sampling")
    alpha1: float = Field(10.0, gt=0.0, description="Transport-cost weight")
    alpha2: float = Field(10.0, ge=0.0, description="HJB penalty weight")
    width: int = Field(32, ge=1, description="Residual network width")
    rank: Optional[int] = Field(None, ge=1, description="Rank of the quadratic term, defaults to min(10, d)")
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(1e-2, gt=0.0)
    epochs: int = Field(50, ge=0)
    seed: int = 0
    val_interval: int = Field(20, ge=1)
    patience: int = Field(10, ge=1)
    val_batch: int = Field(2048, ge=1)
    embed_width: Optional[int] = Field(None, ge=1, description="Hidden width w_y of the context embedding")
    embed_out: Optional[int] = Field(None, ge=1, description="Output width w_yout of the context embedding")
    clamp: float = Field(1.5, gt=0.0, description="Box constraint on the residual network weights")
    joint: bool = Field(False, description="Also learn a flow for y alone (joint density)")

    @model_validator(mode="after")
    def _embedding_pair(self) -> "FlowConfig":
        if (self.embed_width is None) != (self.embed_out is None):
            raise ValueError("embed_width and embed_out must be set together")
        return self

    @property
    def eval_steps(self) -> int:
        return self.nt_eval or self.nt


class ExperimentConfig(_Config):
    schema_version: int = Field(SCHEMA_VERSION, description="Config schema version")
    task: Literal["joint", "conditional", "lfi"] = "conditional"
    model: Literal["pcp", "cot"] = "pcp"
    dataset: str = Field(..., description="Path to a dataset CSV with its .meta.json sidecar")
    preset: Optional[str] = Field(None, description="Search-space preset name")
    pilot_tuples: int = Field(100, ge=1, description="Sampled hyperparameter tuples")
    pilot_epochs: int = Field(5, ge=0, description="Epochs per pilot run")
    top_k: int = Field(10, ge=1, description="Pilot tuples promoted to full training")
    repeats: int = Field(5, ge=1, description="Full-training runs per promoted tuple")
    full_epochs: int = Field(200, ge=0, description="Epoch cap for full training (early stopping applies)")
    seed: int = 0
    mmd_kernel: Literal["unit", "plain"] = Field("unit", description="unit: exp(-d^2/2), plain: exp(-d^2)")
    mmd_samples: int = Field(2000, ge=1, description="Maximum test rows used for MMD")
    sampling: SampleConfig = Field(default_factory=SampleConfig)

    @model_validator(mode="after")
    def _budget(self) -> "ExperimentConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        if self.top_k > self.pilot_tuples:
            raise ValueError(f"top_k ({self.top_k}) exceeds pilot_tuples ({self.pilot_tuples})")
        return self


SCHEMA_MODELS: Dict[str, Type[BaseModel]] = {
    "experiment": ExperimentConfig,
    "pcp_train": PcpTrainConfig,
    "flow": FlowConfig,
    "sample": SampleConfig,
}


def build(model: Type[ModelT], data: Dict[str, Any]) -> ModelT:
    """Validate ``data`` into ``model``, raising ConfigError on failure."""
    try:
        return model.model_validate(data)
    except PydanticValidationError as exc:
        raise ConfigError(f"invalid {model.__name__}: {exc}") from exc


def load_config(path: str | Path, model: Type[ModelT] = ExperimentConfig) -> ModelT:
    path = Path(path)
    try:
        data = orjson.loads(path.read_bytes())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except orjson.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return build(model, data)


def json_schemas() -> Dict[str, Dict[str, Any]]:
    schemas = {}
    for name, model in SCHEMA_MODELS.items():
        schema = model.model_json_schema()
        schema["schema_version"] = SCHEMA_VERSION
        schemas[name] = schema
    return schemas


def write_schemas(out_dir: str | Path) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, schema in json_schemas().items():
        path = out_dir / f"{name}.schema.json"
        path.write_bytes(orjson.dumps(schema, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))
        written[name] = path
    return written
