"""Two-stage orchestration: stage-1 masks, then stage-2 proportion training."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import Sample
from .detect import DetectParams, Stage1, annotated, greedy_match, oracle_mask, train_stage1
from .losses import LossMode
from .propnet import ProportionParams, predict, train_proportion

log = logging.getLogger(__name__)


class MaskMode(str, enum.Enum):
    MASKED = "masked"
    UNMASKED = "unmasked"
    ORACLE = "oracle-mask"


@dataclass
class PipelineConfig:
    loss_mode: LossMode = LossMode.WFL
    mask_mode: MaskMode = MaskMode.MASKED
    detect: DetectParams = field(default_factory=DetectParams)
    proportion: ProportionParams = field(default_factory=ProportionParams)
    seed: int = 0

    def __post_init__(self):
        self.loss_mode = LossMode(self.loss_mode)
        self.mask_mode = MaskMode(self.mask_mode)


def full_mask(sample: Sample) -> np.ndarray:
    return np.ones(sample.shape, dtype=np.uint8)


def sample_oracle_mask(sample: Sample, alpha: float) -> np.ndarray:
    cells = sample.all_cells
    if cells is None:
        raise ValueError(f"sample {sample.id}: oracle-mask mode needs ground-truth cells")
    return oracle_mask(cells, sample.shape, alpha)


def held_out_detection_f1(stage1: Stage1, samples: Sequence[Sample]) -> float | None:
    """Detection F1 pooled over samples whose cells were not used for training."""
    tp = n_pred = n_gt = 0
    radius = stage1.params.match_radius
    for s in samples:
        if s.cells is not None or s.oracle_cells is None:
            continue
        dets = stage1.detect(s.image)
        pairs = greedy_match([(d.row, d.col) for d in dets], [(c.row, c.col) for c in s.oracle_cells], radius)
        tp += len(pairs)
        n_pred += len(dets)
        n_gt += len(s.oracle_cells)
    if n_gt == 0:
        return None
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def fit_stage1(samples: Sequence[Sample], config: PipelineConfig):
    hp = replace(config.detect, seed=config.seed)
    return train_stage1(annotated(samples), hp)


def prepare_masks(samples: Sequence[Sample], config: PipelineConfig, stage1: Stage1 | None = None):
    """Per-sample masks for the configured mode, plus held-out detection F1 when stage 1 ran."""
    if config.mask_mode is MaskMode.UNMASKED:
        return [full_mask(s) for s in samples], None
    if config.mask_mode is MaskMode.ORACLE:
        return [sample_oracle_mask(s, config.detect.alpha) for s in samples], None
    if stage1 is None:
        stage1, _, _ = fit_stage1(samples, config)
    masks = [stage1.mask(s.image) for s in samples]
    return masks, held_out_detection_f1(stage1, samples)


def fold_params(config: PipelineConfig, fold: int) -> ProportionParams:
    return replace(config.proportion, seed=config.seed * 1000 + fold)


def fit_and_predict(train_samples, train_masks, test_samples, test_masks, config: PipelineConfig, fold: int = 0):
    model, _ = train_proportion(train_samples, train_masks, config.loss_mode, fold_params(config, fold))
    r_hat, _ = predict(model, [s.image for s in test_samples], test_masks)
    return r_hat
