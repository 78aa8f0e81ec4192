"""YAML configuration: one section per dataclass, unknown keys rejected.

Example::

    refine:   {n_views: 4, steps: 100, depth_gate_radius: 6.0}
    weights:  {sil: 1.0, mv_sil: 1.0, depth: 0.5, photo: 10.0, size: 0.5, y: 1.0}
    priors:   {size_mean: [1.53, 1.63, 3.88], y_plane: 1.65}
    motion:   {gate_radius: 3.0, motion_threshold: 0.1}
    eval:     {iou_threshold: 0.5, recall_points: 40}
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .evaluation import EvalConfig
from .losses import LossWeights, Priors
from .motion import MotionConfig
from .refine import RefineConfig

SECTIONS = {
    "refine": RefineConfig,
    "weights": LossWeights,
    "priors": Priors,
    "motion": MotionConfig,
    "eval": EvalConfig,
}


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    refine: RefineConfig = field(default_factory=RefineConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    priors: Priors = field(default_factory=Priors)
    motion: MotionConfig = field(default_factory=MotionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> Dict[str, Any]:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)


def _section(cls, values: Dict[str, Any], where: str):
    known = {f.name for f in fields(cls)}
    extra = set(values) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(data: Optional[Dict[str, Any]], base: PipelineConfig | None = None) -> PipelineConfig:
    base = base or PipelineConfig()
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("configuration root must be a mapping")
    extra = set(data) - set(SECTIONS)
    if extra:
        raise ConfigError(f"unknown sections {sorted(extra)}")
    out = {}
    for name, cls in SECTIONS.items():
        merged = {**asdict(getattr(base, name)), **(data.get(name) or {})}
        out[name] = _section(cls, merged, name)
    return PipelineConfig(**out)


def load(path=None, overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> PipelineConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (e.g. command-line flags)."""
    cfg = PipelineConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file {p} does not exist")
        try:
            cfg = from_dict(yaml.safe_load(p.read_text()), cfg)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    if overrides:
        cfg = from_dict({k: v for k, v in overrides.items() if v}, cfg)
    return cfg
