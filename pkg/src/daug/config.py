"""Experiment configuration: one YAML file drives every pipeline stage.

Each stage gets its own hash over the config sections it reads plus the
hashes of the stages it consumes, so editing e.g. the encoder settings does
not invalidate the diffusion checkpoint.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .classifier import ClassifierConfig
from .diffusion import DenoiserConfig, GuidanceSpec
from .errors import ConfigurationError
from .hybridclip import HybridConfig
from .synthdata import DatasetSpec

OUTPUT_ROOT_ENV = "DAUG_OUTPUT_ROOT"


@dataclass
class ScheduleConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class HeatmapConfig:
    # guide list; the first entry feeds the encoder's third channel
    guides: list = field(default_factory=lambda: [{"target": 0, "sign": 1, "mode": "softmax", "scale": 3.0}])
    t_start: int = 100
    smooth_radius: int = 1
    batch_size: int = 128

    def guide_specs(self) -> list[GuidanceSpec]:
        return [GuidanceSpec(**g) for g in self.guides]

    @property
    def default_guide(self) -> GuidanceSpec:
        return self.guide_specs()[0]


@dataclass
class EvalConfig:
    k: int = 5
    ablation_seeds: list = field(default_factory=lambda: [0, 1, 2])
    clip_w: float = 1.0
    fp_disease: str = "Pleural Effusion"
    fp_confuser: int = 3
    fp_samples: int = 60
    fp_scale: float = 3.0
    figure_samples: int = 6


@dataclass
class ExperimentConfig:
    name: str = "desk"
    seed: int = 0
    output_root: str = "runs/desk"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    heatmaps: HeatmapConfig = field(default_factory=HeatmapConfig)
    hybrid: HybridConfig = field(default_factory=HybridConfig)
    hybrid_uses_heatmaps: bool = True
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"] = self.dataset.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            val = d[f.name]
            sub = _SECTIONS.get(f.name)
            if sub is None:
                kw[f.name] = val
            elif sub is DatasetSpec:
                kw[f.name] = DatasetSpec.from_dict({**DatasetSpec().to_dict(), **(val or {})})
            else:
                kw[f.name] = _build(sub, val or {}, f.name)
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self) -> "ExperimentConfig":
        self.dataset.validate()
        if not 0 < self.heatmaps.t_start <= self.schedule.T:
            raise ConfigurationError(f"heatmaps.t_start must lie in [1, T={self.schedule.T}]")
        if not self.heatmaps.guides:
            raise ConfigurationError("heatmaps.guides must list at least one guide")
        self.heatmaps.guide_specs()
        if not 0.0 <= self.hybrid.w <= 1.0:
            raise ConfigurationError("hybrid.w must lie in [0, 1]")
        return self

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same config with every stage reseeded."""
        return replace(
            self, seed=int(seed),
            dataset=replace(self.dataset, seed=int(seed)),
            denoiser=replace(self.denoiser, seed=int(seed)),
            classifier=replace(self.classifier, seed=int(seed)),
            hybrid=replace(self.hybrid, seed=int(seed)),
        )

    def resolved_root(self, override: str | None = None) -> Path:
        return Path(override or os.environ.get(OUTPUT_ROOT_ENV) or self.output_root)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_root")
        return stable_hash(d)

    def stage_hashes(self) -> dict[str, str]:
        d = self.to_dict()
        h = {}
        h["synth"] = stable_hash({"dataset": d["dataset"]})
        h["train-diffusion"] = stable_hash({"up": h["synth"], "schedule": d["schedule"],
                                            "denoiser": d["denoiser"]})
        h["train-classifier"] = stable_hash({"up": h["synth"], "schedule": d["schedule"],
                                             "classifier": d["classifier"]})
        h["gen-heatmaps"] = stable_hash({"up": [h["train-diffusion"], h["train-classifier"]],
                                         "heatmaps": d["heatmaps"], "seed": d["seed"]})
        h["train-hybrid"] = stable_hash({"up": h["gen-heatmaps"] if self.hybrid_uses_heatmaps else h["synth"],
                                         "hybrid": d["hybrid"], "uses_heatmaps": self.hybrid_uses_heatmaps})
        h["eval"] = stable_hash({"up": [h["train-hybrid"], h["gen-heatmaps"]], "eval": d["eval"]})
        h["ablate"] = stable_hash({"up": h["gen-heatmaps"], "hybrid": d["hybrid"], "eval": d["eval"]})
        h["figures"] = stable_hash({"up": [h["gen-heatmaps"]], "eval": d["eval"]})
        return h


_SECTIONS = {"dataset": DatasetSpec, "schedule": ScheduleConfig, "denoiser": DenoiserConfig,
             "classifier": ClassifierConfig, "heatmaps": HeatmapConfig, "hybrid": HybridConfig,
             "eval": EvalConfig}


def _build(cls, values: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigurationError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**values)


def stable_hash(obj) -> str:
    """sha256 of canonical JSON; independent of dict key order."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, (tuple, set)):
        return list(o)
    if hasattr(o, "tolist"):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigurationError(f"cannot parse {path}: {e}") from e
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return ExperimentConfig.from_dict(data or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(cfg.to_dict(), default=_jsonable)), sort_keys=False)
