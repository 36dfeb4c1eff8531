"""Interval-bucket evaluation: confusion matrices, macro scores, detection scores, k-fold CV."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import INTERVAL_ORDER, INTERVALS, N_INTERVALS, CellRecord, IntervalId, Sample, interval_of
from .detect import Detection, greedy_match

TABLE_COLUMNS = ("0-1%", "1-25%", "25-50%", "50-75%", "75-100%", "mRecall", "mPrecision", "mF1")


def bucketize_predictions(r_hats: Sequence[float], truths: Sequence[IntervalId | str]) -> np.ndarray:
    """5x5 counts, rows = true interval, columns = interval_of(r_hat)."""
    if len(r_hats) != len(truths):
        raise ValueError(f"{len(r_hats)} predictions for {len(truths)} labels")
    conf = np.zeros((N_INTERVALS, N_INTERVALS), dtype=np.int64)
    for r, t in zip(r_hats, truths):
        conf[INTERVALS[IntervalId(t)].index, INTERVALS[interval_of(r)].index] += 1
    return conf


def per_class_scores(confusion) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class recall, precision, F1 with every zero denominator giving 0."""
    c = np.asarray(confusion, dtype=np.float64)
    if c.shape != (N_INTERVALS, N_INTERVALS):
        raise ValueError(f"confusion must be {N_INTERVALS}x{N_INTERVALS}, got {c.shape}")
    diag = np.diag(c)
    rows, cols = c.sum(axis=1), c.sum(axis=0)
    recall = np.divide(diag, rows, out=np.zeros_like(diag), where=rows > 0)
    precision = np.divide(diag, cols, out=np.zeros_like(diag), where=cols > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(diag), where=denom > 0)
    return recall, precision, f1


def macro_metrics(confusion) -> tuple[float, float, float, np.ndarray]:
    """(mRecall, mPrecision, mF1, per-interval recall); mF1 is the mean of per-class F1."""
    recall, precision, f1 = per_class_scores(confusion)
    return float(recall.mean()), float(precision.mean()), float(f1.mean()), recall


def detection_metrics(pred: Sequence[Detection | tuple], gt: Sequence[CellRecord | tuple], match_radius: float = 3.0):
    """Greedy one-to-one matching by ascending distance; returns (precision, recall, f1)."""
    if match_radius <= 0:
        raise ValueError("match_radius must be > 0")
    p = [_point(x) for x in pred]
    g = [_point(x) for x in gt]
    tp = len(greedy_match(p, g, match_radius))
    precision = tp / len(p) if p else 0.0
    recall = tp / len(g) if g else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def _point(x) -> tuple[int, int]:
    if isinstance(x, (Detection, CellRecord)):
        return (x.row, x.col)
    return (int(x[0]), int(x[1]))


@dataclass
class EvalReport:
    confusion: np.ndarray
    per_interval_recall: np.ndarray
    m_recall: float
    m_precision: float
    m_f1: float
    detection_f1: float | None = None
    folds: list[dict] = field(default_factory=list)

    @classmethod
    def from_confusion(cls, confusion, detection_f1: float | None = None) -> "EvalReport":
        mr, mp, mf, rec = macro_metrics(confusion)
        return cls(np.asarray(confusion, dtype=np.int64), rec, mr, mp, mf, detection_f1)

    @classmethod
    def from_predictions(cls, r_hats, truths, detection_f1: float | None = None) -> "EvalReport":
        return cls.from_confusion(bucketize_predictions(r_hats, truths), detection_f1)

    @classmethod
    def aggregate(cls, reports: Sequence["EvalReport"]) -> "EvalReport":
        """Unweighted fold mean of every score; confusion is the fold sum."""
        conf = sum((r.confusion for r in reports), np.zeros((N_INTERVALS, N_INTERVALS), dtype=np.int64))
        det = [r.detection_f1 for r in reports if r.detection_f1 is not None]
        return cls(
            confusion=conf,
            per_interval_recall=np.mean([r.per_interval_recall for r in reports], axis=0),
            m_recall=float(np.mean([r.m_recall for r in reports])),
            m_precision=float(np.mean([r.m_precision for r in reports])),
            m_f1=float(np.mean([r.m_f1 for r in reports])),
            detection_f1=float(np.mean(det)) if det else None,
            folds=[r.summary() for r in reports],
        )

    def summary(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "per_interval_recall": [float(x) for x in self.per_interval_recall],
            "m_recall": self.m_recall,
            "m_precision": self.m_precision,
            "m_f1": self.m_f1,
            "detection_f1": self.detection_f1,
        }

    def to_dict(self) -> dict:
        d = self.summary()
        d["intervals"] = [i.value for i in INTERVAL_ORDER]
        if self.folds:
            d["folds"] = self.folds
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def row(self) -> list[float]:
        return [float(x) for x in self.per_interval_recall] + [self.m_recall, self.m_precision, self.m_f1]


def format_table(rows: dict[str, EvalReport]) -> str:
    """Aligned text table: per-interval recall, mRecall, mPrecision, mF1."""
    name_w = max([len("Method")] + [len(n) for n in rows])
    col_w = max(len(c) for c in TABLE_COLUMNS) + 1
    head = "Method".ljust(name_w) + "".join(c.rjust(col_w) for c in TABLE_COLUMNS)
    lines = [head, "-" * len(head)]
    for name, rep in rows.items():
        lines.append(name.ljust(name_w) + "".join(f"{v:.3f}".rjust(col_w) for v in rep.row()))
    return "\n".join(lines) + "\n"


def fold_assignment(samples: Sequence[Sample], k: int, seed: int) -> np.ndarray:
    """Seeded fold index per sample, stratified by interval (round-robin after shuffling)."""
    n = len(samples)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise ValueError(f"k={k} folds but only {n} samples")
    rng = np.random.default_rng([seed, 31])
    perm = rng.permutation(n)
    by_interval = sorted(perm, key=lambda i: INTERVALS[samples[i].interval].index)
    folds = np.empty(n, dtype=np.int64)
    for pos, i in enumerate(by_interval):
        folds[i] = pos % k
    return folds


def cross_validate(samples: Sequence[Sample], k: int, config, masks=None, stage1_f1: float | None = None) -> EvalReport:
    """Train on k-1 folds, score the held-out fold, average fold scores.

    ``config`` is a :class:`masked_llp.pipeline.PipelineConfig`; ``masks``
    (one per sample) may be precomputed, otherwise they are built per config.
    """
    from .pipeline import prepare_masks, fit_and_predict

    if masks is None:
        masks, stage1_f1 = prepare_masks(samples, config)
    folds = fold_assignment(samples, k, config.seed)
    reports = []
    for f in range(k):
        test = np.flatnonzero(folds == f)
        train = np.flatnonzero(folds != f)
        r_hat = fit_and_predict(
            [samples[i] for i in train], [masks[i] for i in train],
            [samples[i] for i in test], [masks[i] for i in test],
            config, fold=f,
        )
        reports.append(EvalReport.from_predictions(r_hat, [samples[i].interval for i in test], stage1_f1))
    return EvalReport.aggregate(reports)
