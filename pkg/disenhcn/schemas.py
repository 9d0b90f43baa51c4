from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# Enums for hypergraph structure and model switches
class HyperedgeType(str, Enum):
    L = "L"
    T = "T"
    A = "A"
    LT = "LT"
    LA = "LA"
    TA = "TA"
    LTA = "LTA"
    U = "U"


class Aspect(str, Enum):
    LOCATION = "L"
    TIME = "T"
    ACTIVITY = "A"


class FusionMode(str, Enum):
    ATTENTION = "attention"
    MEAN = "mean"
    MAX = "max"


class ConvMode(str, Enum):
    EFF_HGCONV = "eff_hgconv"
    HGCONV_LINEARIZED = "hgconv_linearized"


class LRSchedule(str, Enum):
    STEP = "step"
    MILESTONES = "milestones"


class L2Scope(str, Enum):
    TOUCHED = "touched"
    FULL = "full"


ALL_TYPES: Tuple[HyperedgeType, ...] = tuple(HyperedgeType)
ASPECTS: Tuple[Aspect, ...] = tuple(Aspect)


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def _lower(value):
    return value.lower() if isinstance(value, str) else value


# Configuration schemas
class FilterConfig(BaseModel):
    min_locations_per_user: int = Field(10, ge=0)
    min_activities_per_user: int = Field(5, ge=0)
    min_activity_frequency: int = Field(0, ge=0)


class SplitConfig(BaseModel):
    ratios: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    @field_validator("ratios", mode="before")
    @classmethod
    def parse_ratios(cls, v):
        return _split_list(v)

    @field_validator("ratios")
    @classmethod
    def ratios_form_a_partition(cls, v):
        if any(r <= 0 for r in v):
            raise ValueError("split ratios must be positive")
        if abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {sum(v)}")
        return v


class ModelConfig(BaseModel):
    d: int = Field(120, gt=0)
    layers: int = Field(1, ge=1)
    enabled_types: Tuple[HyperedgeType, ...] = ALL_TYPES
    fusion: FusionMode = FusionMode.ATTENTION
    conv: ConvMode = ConvMode.EFF_HGCONV

    @field_validator("d")
    @classmethod
    def d_divisible_by_three(cls, v):
        if v % 3 != 0:
            raise ValueError("embedding size d must be divisible by 3")
        return v

    @field_validator("enabled_types", mode="before")
    @classmethod
    def parse_types(cls, v):
        v = _split_list(v)
        if isinstance(v, (list, tuple)):
            return [t.upper() if isinstance(t, str) else t for t in v]
        return v

    @field_validator("enabled_types")
    @classmethod
    def canonical_type_order(cls, v):
        if not v:
            raise ValueError("at least one hyperedge type must be enabled")
        return tuple(t for t in ALL_TYPES if t in set(v))

    @field_validator("fusion", "conv", mode="before")
    @classmethod
    def lower_model_modes(cls, v):
        return _lower(v)

    @property
    def chunk(self) -> int:
        return self.d // 3


class TrainConfig(BaseModel):
    lr: float = Field(1e-3, gt=0)
    lr_decay: float = Field(0.1, gt=0, le=1)
    lr_decay_every: int = Field(20, ge=1)
    lr_schedule: LRSchedule = LRSchedule.STEP
    lr_milestones: Tuple[int, ...] = (50, 100, 200, 400)
    milestone_decay: float = Field(0.5, gt=0, le=1)
    epochs: int = Field(500, ge=1)
    patience: int = Field(20, ge=1)
    batch_size: int = Field(2048, ge=1)
    negatives_per_positive: int = Field(1, ge=1)
    l2_lambda: float = Field(3e-5, ge=0)
    gamma: float = Field(3e-3, ge=0)
    seed: int = 2023
    eval_k: int = Field(10, ge=1)
    l2_scope: L2Scope = L2Scope.TOUCHED
    exclude_train: bool = False

    @field_validator("lr_milestones", mode="before")
    @classmethod
    def parse_milestones(cls, v):
        return _split_list(v)

    @field_validator("lr_schedule", "l2_scope", mode="before")
    @classmethod
    def lower_train_modes(cls, v):
        return _lower(v)

    def lr_at(self, epoch: int) -> float:
        """Learning rate in effect during the 0-based ``epoch``."""
        if self.lr_schedule == LRSchedule.MILESTONES:
            passed = sum(1 for m in self.lr_milestones if m <= epoch)
            return self.lr * self.milestone_decay ** passed
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)


class SynthSpec(BaseModel):
    n_users: int = Field(100, gt=0)
    n_locations: int = Field(20, gt=0)
    n_times: int = Field(8, gt=0)
    n_activities: int = Field(30, gt=0)
    clusters: Tuple[int, int, int] = (4, 2, 5)
    records_per_user: int = Field(40, gt=0)
    noise_rate: float = Field(0.1, ge=0, le=1)
    seed: int = 13

    @field_validator("clusters", mode="before")
    @classmethod
    def parse_clusters(cls, v):
        return _split_list(v)

    @model_validator(mode="after")
    def clusters_fit_entities(self):
        counts = (self.n_locations, self.n_times, self.n_activities)
        for k, n in zip(self.clusters, counts):
            if k < 1 or k > n:
                raise ValueError(f"cluster count {k} must lie in [1, {n}]")
        return self


class RunConfig(FilterConfig, SplitConfig, ModelConfig, TrainConfig):
    """Flat union of every run-level setting; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid")

    input_path: Optional[str] = None
    bundle_dir: Optional[str] = None
    out_dir: Optional[str] = None

    def as_filter_config(self) -> FilterConfig:
        return FilterConfig(**self.model_dump(include=set(FilterConfig.model_fields)))

    def as_split_config(self) -> SplitConfig:
        return SplitConfig(**self.model_dump(include=set(SplitConfig.model_fields)))

    def as_model_config(self) -> ModelConfig:
        return ModelConfig(**self.model_dump(include=set(ModelConfig.model_fields)))

    def as_train_config(self) -> TrainConfig:
        return TrainConfig(**self.model_dump(include=set(TrainConfig.model_fields)))


# Report schemas
class MetricsReport(BaseModel):
    recall_at_k: float = Field(..., ge=0, le=1)
    ndcg_at_k: float = Field(..., ge=0, le=1)
    k: int = Field(..., ge=1)
    n_records: int = Field(..., ge=0)
    per_record_ranks: Optional[List[int]] = None

    def to_json_dict(self) -> dict:
        return {
            "k": self.k,
            "recall": self.recall_at_k,
            "ndcg": self.ndcg_at_k,
            "n_records": self.n_records,
        }
