"""Run configuration: a JSON document with fixed sections and validated ranges.

Unknown keys are rejected at every level. ``RunConfig.from_dict(cfg.to_dict())``
reproduces ``cfg``.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .detect import ConfigError, DetectParams
from .losses import LossMode
from .pipeline import MaskMode, PipelineConfig
from .propnet import ProportionParams
from .synthgen import PROFILES

SEED_ENV = "MASKED_LLP_SEED"


@dataclass
class Paths:
    dataset: str | None = None
    output: str | None = None
    checkpoints: str | None = None


@dataclass
class GeneratorSection:
    profile: str = "easy"
    seed: int = 1
    n_samples: int | None = None


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    detect: DetectParams = field(default_factory=DetectParams)
    proportion: ProportionParams = field(default_factory=ProportionParams)
    loss_mode: str = LossMode.WFL.value
    mask_mode: str = MaskMode.MASKED.value
    folds: int = 4
    seed: int = 0
    threads: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        _reject_unknown(doc, cls, "config")
        kw = {}
        for f in fields(cls):
            if f.name not in doc:
                continue
            section = _SECTIONS.get(f.name)
            if section is not None:
                value = doc[f.name]
                if not isinstance(value, dict):
                    raise ConfigError(f"config.{f.name} must be an object")
                _reject_unknown(value, section, f"config.{f.name}")
                kw[f.name] = section(**value)
            else:
                kw[f.name] = doc[f.name]
        cfg = cls(**kw)
        try:
            cfg.validate()
        except TypeError as exc:
            raise ConfigError(f"config value has the wrong type: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)

    def validate(self) -> None:
        d, p = self.detect, self.proportion
        checks = [
            (self.generator.profile in PROFILES, f"generator.profile must be one of {PROFILES}"),
            (self.generator.n_samples is None or self.generator.n_samples >= 1, "generator.n_samples must be >= 1"),
            (d.sigma > 0, "detect.sigma must be > 0"),
            (0 < d.threshold < 1, "detect.threshold must lie in (0, 1)"),
            (d.nms_radius >= 1, "detect.nms_radius must be >= 1"),
            (d.alpha > 0, "detect.alpha must be > 0"),
            (d.match_radius > 0, "detect.match_radius must be > 0"),
            (d.det_epochs >= 0 and d.cls_epochs >= 0, "detect epochs must be >= 0"),
            (d.det_lr > 0 and d.cls_lr > 0, "detect learning rates must be > 0"),
            (d.det_batch >= 1 and d.cls_batch >= 1, "detect batch sizes must be >= 1"),
            (d.optimizer in ("momentum", "adam"), "detect.optimizer must be 'momentum' or 'adam'"),
            (0 <= d.momentum < 1, "detect.momentum must lie in [0, 1)"),
            (p.epochs >= 0, "proportion.epochs must be >= 0"),
            (p.lr > 0, "proportion.lr must be > 0"),
            (p.batch >= 1, "proportion.batch must be >= 1"),
            (p.patience >= 1, "proportion.patience must be >= 1"),
            (0 <= p.val_fraction < 1, "proportion.val_fraction must lie in [0, 1)"),
            (p.downsample >= 1 and p.downsample & (p.downsample - 1) == 0, "proportion.downsample must be a power of two"),
            (p.optimizer in ("momentum", "adam"), "proportion.optimizer must be 'momentum' or 'adam'"),
            (0 <= p.momentum < 1, "proportion.momentum must lie in [0, 1)"),
            (self.loss_mode in [m.value for m in LossMode], f"loss_mode must be one of {[m.value for m in LossMode]}"),
            (self.mask_mode in [m.value for m in MaskMode], f"mask_mode must be one of {[m.value for m in MaskMode]}"),
            (self.folds >= 2, "folds must be >= 2"),
            (self.threads >= 1, "threads must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def with_seed_from_env(self) -> "RunConfig":
        raw = os.environ.get(SEED_ENV)
        if raw is None:
            return self
        try:
            return replace(self, seed=int(raw))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            loss_mode=self.loss_mode,
            mask_mode=self.mask_mode,
            detect=self.detect,
            proportion=self.proportion,
            seed=self.seed,
        )


_SECTIONS = {
    "paths": Paths,
    "generator": GeneratorSection,
    "detect": DetectParams,
    "proportion": ProportionParams,
}


def _reject_unknown(doc: dict, cls, where: str) -> None:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
