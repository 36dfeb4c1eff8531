"""Shared types, the five proportion buckets, and the on-disk dataset format.

Grids are plain numpy arrays, row-major with the origin at the top-left:
``(H, W)`` for masks and heatmaps, ``(H, W, C)`` for images. A dataset
directory holds ``manifest.json`` plus one netpbm image and one annotation
JSON per sample.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DatasetError(ValueError):
    """Raised when a dataset directory cannot be read or fails validation."""


class IntervalId(str, enum.Enum):
    I0_1 = "I0_1"
    I1_25 = "I1_25"
    I25_50 = "I25_50"
    I50_75 = "I50_75"
    I75_100 = "I75_100"


@dataclass(frozen=True)
class ProportionInterval:
    id: IntervalId
    lower: float
    upper: float
    gamma: float

    @property
    def midpoint(self) -> float:
        return (self.lower + self.upper) / 2.0

    @property
    def index(self) -> int:
        return INTERVAL_ORDER.index(self.id)

    @property
    def label(self) -> str:
        return f"{self.lower * 100:g}-{self.upper * 100:g}%"

    def contains(self, r: float) -> bool:
        if self.id is IntervalId.I0_1 and r == 0.0:
            return True
        return self.lower < r <= self.upper


INTERVALS: dict[IntervalId, ProportionInterval] = {
    IntervalId.I0_1: ProportionInterval(IntervalId.I0_1, 0.0, 0.01, 0.0),
    IntervalId.I1_25: ProportionInterval(IntervalId.I1_25, 0.01, 0.25, 2.0),
    IntervalId.I25_50: ProportionInterval(IntervalId.I25_50, 0.25, 0.5, 2.0),
    IntervalId.I50_75: ProportionInterval(IntervalId.I50_75, 0.5, 0.75, 2.0),
    IntervalId.I75_100: ProportionInterval(IntervalId.I75_100, 0.75, 1.0, 2.0),
}
INTERVAL_ORDER: tuple[IntervalId, ...] = tuple(INTERVALS)
N_INTERVALS = len(INTERVAL_ORDER)


def get_interval(interval: IntervalId | str | ProportionInterval) -> ProportionInterval:
    if isinstance(interval, ProportionInterval):
        return interval
    return INTERVALS[IntervalId(interval)]


def interval_of(r: float) -> IntervalId:
    """Bucket a proportion. Buckets are lower-open/upper-closed; 0 goes to I0_1."""
    r = float(r)
    if not (0.0 <= r <= 1.0) or math.isnan(r):
        raise ValueError(f"proportion must lie in [0, 1], got {r!r}")
    for iid, iv in INTERVALS.items():
        if r <= iv.upper:
            return iid
    raise AssertionError("unreachable")  # pragma: no cover


class CellClass(str, enum.Enum):
    POS_TUMOR = "pos_tumor"
    NEG_TUMOR = "neg_tumor"
    NON_TUMOR = "non_tumor"

    @property
    def is_tumor(self) -> bool:
        return self is not CellClass.NON_TUMOR


@dataclass(frozen=True)
class CellRecord:
    row: int
    col: int
    cls: CellClass

    def to_json(self) -> dict:
        return {"row": self.row, "col": self.col, "class": self.cls.value}

    @classmethod
    def from_json(cls, d: dict) -> "CellRecord":
        return cls(int(d["row"]), int(d["col"]), CellClass(d["class"]))


def tumor_proportion(cells: Iterable[CellRecord]) -> float:
    n_pos = n_neg = 0
    for c in cells:
        n_pos += c.cls is CellClass.POS_TUMOR
        n_neg += c.cls is CellClass.NEG_TUMOR
    if n_pos + n_neg == 0:
        raise ValueError("no tumor cells")
    return n_pos / (n_pos + n_neg)


@dataclass(frozen=True)
class Sample:
    """One core image with its proportion label.

    ``cells`` holds the training-visible cell annotations (only a small
    annotated subset carries them). ``oracle_cells`` and ``true_r`` are
    synthetic ground truth kept for evaluation and oracle masks only.
    """

    id: str
    image: np.ndarray
    interval: IntervalId
    true_r: float
    cells: tuple[CellRecord, ...] | None = None
    oracle_cells: tuple[CellRecord, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim == 2:
            img = img[:, :, None]
        img.flags.writeable = False
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "interval", IntervalId(self.interval))
        if self.cells is not None:
            object.__setattr__(self, "cells", tuple(self.cells))
        if self.oracle_cells is not None:
            object.__setattr__(self, "oracle_cells", tuple(self.oracle_cells))

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[:2]

    @property
    def all_cells(self) -> tuple[CellRecord, ...] | None:
        """Annotated cells if present, else the oracle cells."""
        return self.cells if self.cells is not None else self.oracle_cells

    def validate(self) -> None:
        if not np.all(np.isfinite(self.image)):
            raise DatasetError(f"sample {self.id}: image has non-finite values")
        if self.image.min() < 0 or self.image.max() > 1:
            raise DatasetError(f"sample {self.id}: image values outside [0, 1]")
        r = self.true_r
        if not (0.0 <= r <= 1.0):
            raise DatasetError(f"sample {self.id}: true_r {r} outside [0, 1]")
        if not INTERVALS[self.interval].contains(r):
            raise DatasetError(
                f"sample {self.id}: interval mismatch, true_r={r} is not in {self.interval.value}"
            )
        h, w = self.shape
        for cells in (self.cells, self.oracle_cells):
            if cells is None:
                continue
            for c in cells:
                if not (0 <= c.row < h and 0 <= c.col < w):
                    raise DatasetError(f"sample {self.id}: cell {c} outside {h}x{w} grid")
            if tumor_proportion(cells) != r:
                raise DatasetError(
                    f"sample {self.id}: true_r={r} disagrees with annotated cell counts"
                )


# ---------------------------------------------------------------- netpbm I/O


def write_netpbm(path: str | Path, image: np.ndarray, maxval: int = 65535) -> None:
    """Write a [0,1] float image as binary PGM (1 channel) or PPM (3 channels)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"netpbm needs 1 or 3 channels, got shape {img.shape}")
    if maxval not in (255, 65535):
        raise ValueError("maxval must be 255 or 65535")
    q = np.round(np.clip(img, 0.0, 1.0) * maxval)
    data = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n{maxval}\n".encode() + data)


def read_netpbm(path: str | Path) -> np.ndarray:
    """Read binary PGM/PPM; returns float64 in [0,1] with shape (H, W, C)."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated netpbm header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm magic {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    channels = 1 if magic == b"P5" else 3
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * channels
    arr = np.frombuffer(raw, dtype=dtype, count=n, offset=pos)
    return arr.reshape(h, w, channels).astype(np.float64) / maxval


def quantize(image: np.ndarray, maxval: int = 65535) -> np.ndarray:
    """Snap values to the grid netpbm stores, so save/load is exact."""
    return np.round(np.clip(image, 0.0, 1.0) * maxval) / maxval


# ---------------------------------------------------------------- dataset I/O


def _write_cells(path: Path, cells: Sequence[CellRecord]) -> None:
    path.write_text(json.dumps({"cells": [c.to_json() for c in cells]}, indent=1))


def _read_cells(path: Path, sid: str) -> tuple[CellRecord, ...]:
    try:
        doc = json.loads(path.read_text())
        return tuple(CellRecord.from_json(c) for c in doc["cells"])
    except FileNotFoundError:
        raise DatasetError(f"sample {sid}: missing annotation file {path.name}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"sample {sid}: malformed annotation file {path.name}: {exc}") from None


def save_dataset(samples: Sequence[Sample], path: str | Path) -> Path:
    """Write samples in the directory format read by :func:`load_dataset`.

    Besides the manifest fields ``id, image, annotations, interval, true_r``
    an entry may carry ``oracle_annotations``: the full ground-truth cell list
    of a synthetic sample whose cells are not part of the training annotations.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        ext = "pgm" if s.image.shape[2] == 1 else "ppm"
        image_name = f"{s.id}.{ext}"
        write_netpbm(root / image_name, s.image)
        entry = {
            "id": s.id,
            "image": image_name,
            "annotations": None,
            "interval": s.interval.value,
            "true_r": float(s.true_r),
        }
        if s.cells is not None:
            entry["annotations"] = f"{s.id}.cells.json"
            _write_cells(root / entry["annotations"], s.cells)
        elif s.oracle_cells is not None:
            entry["oracle_annotations"] = f"{s.id}.oracle.json"
            _write_cells(root / entry["oracle_annotations"], s.oracle_cells)
        entries.append(entry)
    (root / "manifest.json").write_text(json.dumps(entries, indent=1) + "\n")
    return root


def load_dataset(path: str | Path) -> list[Sample]:
    root = Path(path)
    manifest = root / "manifest.json"
    try:
        entries = json.loads(manifest.read_text())
    except FileNotFoundError:
        raise DatasetError(f"missing manifest: {manifest}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {manifest}: {exc}") from None
    if not isinstance(entries, list):
        raise DatasetError(f"manifest {manifest} must be a JSON array")

    samples = []
    for i, e in enumerate(entries):
        sid = str(e.get("id", f"#{i}")) if isinstance(e, dict) else f"#{i}"
        try:
            image_name = e["image"]
            interval = IntervalId(e["interval"])
            true_r = float(e["true_r"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"sample {sid}: malformed manifest entry: {exc}") from None
        try:
            image = read_netpbm(root / image_name)
        except FileNotFoundError:
            raise DatasetError(f"sample {sid}: missing image file {image_name}") from None
        except ValueError as exc:
            raise DatasetError(f"sample {sid}: unreadable image: {exc}") from None
        cells = oracle = None
        if e.get("annotations"):
            cells = _read_cells(root / e["annotations"], sid)
        if e.get("oracle_annotations"):
            oracle = _read_cells(root / e["oracle_annotations"], sid)
        s = Sample(sid, image, interval, true_r, cells=cells, oracle_cells=oracle)
        s.validate()
        samples.append(s)
    return samples
