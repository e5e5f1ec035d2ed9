"""Pipeline configuration loaded from JSON; unknown keys are rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError, MissingFileError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyncSettings(_Strict):
    tolerance: float = Field(0.05, gt=0)
    offset: float = 0.0
    estimate_offset: bool = False


class DescriptorSettings(_Strict):
    n: int = Field(256, ge=8)
    seed: int = 42
    smoothing: float = Field(3.0, ge=0)


class MatcherSettings(_Strict):
    max_distance: Optional[int] = Field(None, ge=0)
    cross_check: bool = True
    ratio: Optional[float] = Field(None, gt=0, le=1)


class RansacSettings(_Strict):
    threshold: float = Field(3.0, gt=0)
    iterations: int = Field(2000, ge=1)
    seed: int = 0
    progressive: bool = True


class SubpixelSettings(_Strict):
    enabled: bool = True
    rounds: int = Field(2, ge=1)
    radius: int = Field(10, ge=2)
    search: int = Field(3, ge=1)


class FusionSettings(_Strict):
    gamma_mode: Literal["paper-literal", "zero", "recenter"] = "recenter"
    alpha_mode: Literal["fixed", "optimized"] = "fixed"
    alpha: float = Field(0.5, ge=0, le=1)
    colormap: Optional[Literal["inferno", "jet", "hot"]] = None


class PipelineConfig(_Strict):
    sync: SyncSettings = SyncSettings()
    tau: float = Field(20.0, gt=0)
    min_count: int = Field(7, ge=0, le=16)
    nms: bool = True
    orientation_mode: Literal["atan2", "arctan"] = "atan2"
    max_keypoints: Optional[int] = Field(1500, ge=1)
    descriptor: DescriptorSettings = DescriptorSettings()
    matcher: MatcherSettings = MatcherSettings()
    ransac: RansacSettings = RansacSettings()
    subpixel: SubpixelSettings = SubpixelSettings()
    fusion: FusionSettings = FusionSettings()
    edge_domain: bool = True
    edge_sigma: float = Field(2.0, ge=0)
    min_matches: int = Field(8, ge=4)
    workers: int = Field(1, ge=1)

    @field_validator("tau")
    @classmethod
    def _tau_finite(cls, v):
        if v != v or v in (float("inf"),):
            raise ValueError("tau must be finite")
        return v


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"{path}: no such file")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return parse_config(raw, str(path))


def parse_config(raw, source: str = "<config>") -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be an object")
    try:
        return PipelineConfig.model_validate(raw)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())
        raise ConfigError(f"{source}: {problems}") from exc
