"""Adaptation run configuration."""
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from common.errors import ConfigurationError, DataIOError
from config.settings import ADAPTATION_DEFAULTS as D, DEFAULT_SEED, WORKERS


class AdaptationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    eta: float = Field(default=D["eta"], gt=0, le=1)
    segments_q: int = Field(default=D["segments_q"], ge=2)
    samplings_S: int = Field(default=D["samplings_S"], ge=2)
    dropout_rate: float = Field(default=D["dropout_rate"], ge=0, lt=1)
    grid_cells: int = Field(default=D["grid_cells"], ge=1)
    grid_size: Optional[list[float]] = None  # explicit cell width per dim; overrides grid_cells
    # dropout while fine-tuning on the target; MC-dropout stages use dropout_rate
    finetune_dropout_rate: float = Field(default=D["finetune_dropout_rate"], ge=0, lt=1)
    learning_rate: float = Field(default=D["learning_rate"], gt=0)
    batch_size: int = Field(default=D["batch_size"], ge=1)
    max_epochs: int = Field(default=D["max_epochs"], ge=0)
    early_stop: bool = True
    early_stop_window: int = Field(default=D["early_stop_window"], ge=2)
    early_stop_ratio: float = Field(default=D["early_stop_ratio"], gt=0)
    include_confident: bool = True
    distribution: Literal["gaussian", "laplace"] = "gaussian"
    joint_map: bool = False  # one 2-D map instead of one map per label dimension
    hidden_sizes: list[int] = Field(default_factory=lambda: list(D["hidden_sizes"]))
    source_epochs: int = Field(default=D["source_epochs"], ge=1)
    workers: int = Field(default=WORKERS, ge=1)
    seed: int = DEFAULT_SEED

    # diagnostics
    force_zero_credibility: bool = False
    uniform_prior: bool = False

    @classmethod
    def from_dict(cls, data: dict) -> "AdaptationConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigurationError(f"invalid adaptation config: {e}") from e

    @classmethod
    def from_json(cls, path: str | Path) -> "AdaptationConfig":
        path = Path(path)
        if not path.exists():
            raise DataIOError(f"config not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path.name} is not valid JSON: {e}") from e
        return cls.from_dict(data)

    def updated(self, **changes) -> "AdaptationConfig":
        return AdaptationConfig.from_dict({**self.model_dump(), **changes})
