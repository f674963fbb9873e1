"""Run configuration files (JSON), validated with unknown keys rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .descriptor import (DEFAULT_ZONE_SIZE, DescriptorType, default_region_size,
                         sample_descriptor_type)
from .watershed import WatershedParams


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DescriptorSpec(_Strict):
    kind: Literal["pairwise", "center_based"]
    bbox_size: int = Field(gt=0)
    k: int = Field(default=512, gt=0)
    region_size: Optional[int] = None
    zone_size: int = Field(default=DEFAULT_ZONE_SIZE, gt=0)
    seed: int = 0

    @field_validator("bbox_size")
    @classmethod
    def _odd(cls, v):
        if v % 2 == 0:
            raise ValueError("bbox_size must be odd")
        return v

    def build(self, type_id: int) -> DescriptorType:
        return sample_descriptor_type(self.seed, self.kind, self.bbox_size, self.k,
                                      self.region_size or default_region_size(self.bbox_size),
                                      self.zone_size, type_id)


class FeatureSpec(_Strict):
    mode: Literal["handcrafted", "file_backed"] = "handcrafted"
    box_sizes: list[int] = [3, 9, 17, 33]
    path: Optional[str] = None


class WatershedSpec(_Strict):
    t_high: float = Field(default=0.99, ge=0, le=1)
    t_low: float = Field(default=0.3, ge=0, le=1)
    t_edge: float = Field(default=0.1, ge=0, le=1)
    t_size: int = Field(default=25, ge=1)

    def params(self) -> WatershedParams:
        return WatershedParams(self.t_high, self.t_low, self.t_edge, self.t_size)


class TrainingSpec(_Strict):
    hidden: int = Field(default=512, gt=0)
    dropout: float = Field(default=0.5, ge=0, lt=1)
    loss: Literal["log", "signed_linear"] = "log"
    lr: float = Field(default=0.05, gt=0)
    epochs: int = Field(default=10, gt=0)
    batch: int = Field(default=256, gt=0)
    samples: int = Field(default=200_000, gt=0)
    state_stride: int = Field(default=1, gt=0)


class RunConfig(_Strict):
    descriptor_types: list[DescriptorSpec] = Field(min_length=1)
    models: list[str] = []
    features: FeatureSpec = FeatureSpec()
    watershed: WatershedSpec = WatershedSpec()
    training: TrainingSpec = TrainingSpec()
    threshold: float = 0.0
    max_steps: Optional[int] = Field(default=None, ge=0)
    thresholds: list[float] = []
    seed: int = 0

    def descriptor_objects(self) -> list[DescriptorType]:
        return [spec.build(i) for i, spec in enumerate(self.descriptor_types)]


def load_config(path) -> RunConfig:
    """Parse and validate a run configuration; raises ``ValueError`` on any problem."""
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from None
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())
        raise ValueError(f"{path}: {problems}") from None
