"""Stage 1: heatmap cell detection, per-cell tumor classification, tumor mask."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .core import CellRecord, Sample
from .nn import Network, act, conv, make_optimizer, sigmoid

log = logging.getLogger(__name__)

BCE_EPS = 1e-7


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    row: int
    col: int
    tumor_score: float

    @property
    def is_tumor(self) -> bool:
        return self.tumor_score > 0.5


def detector_topology(width: int = 8) -> list[dict]:
    """Full-resolution widen/narrow conv stack with a linear heatmap output."""
    return [
        conv(3, width), act("relu"),
        conv(width, 2 * width), act("relu"),
        conv(2 * width, width), act("relu"),
        conv(width, 1),
    ]


def classifier_topology() -> list[dict]:
    """Feature extractor (3 conv layers, widths 8/16/16) + per-position linear head."""
    return [
        conv(3, 8), act("relu"),
        conv(8, 16), act("relu"),
        conv(16, 16), act("relu"),
        conv(16, 1, k=1),
    ]


# ---------------------------------------------------------------- heatmaps


def _shape(size) -> tuple[int, int]:
    if isinstance(size, (int, np.integer)):
        return int(size), int(size)
    h, w = size[:2]
    return int(h), int(w)


def render_gt_heatmap(cells: Sequence[CellRecord], size, sigma: float) -> np.ndarray:
    """H(q) = max over cells of exp(-|q - c|^2 / (2 sigma^2)); zero with no cells."""
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    h, w = _shape(size)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    heat = np.zeros((h, w))
    for c in cells:
        if not (0 <= c.row < h and 0 <= c.col < w):
            raise ValueError(f"cell {c} outside {h}x{w} grid")
        g = np.exp(-((rows - c.row) ** 2 + (cols - c.col) ** 2) / (2.0 * sigma * sigma))
        np.maximum(heat, g, out=heat)
    return heat


def detection_loss(H: np.ndarray, H_hat: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum of squared errors and its gradient 2 (H_hat - H)."""
    H = np.asarray(H, dtype=np.float64)
    H_hat = np.asarray(H_hat, dtype=np.float64)
    if H.shape != H_hat.shape:
        raise ValueError(f"shape mismatch: {H.shape} vs {H_hat.shape}")
    diff = H_hat - H
    return float(np.sum(diff * diff)), 2.0 * diff


def find_peaks(H_hat: np.ndarray, threshold: float = 0.3, nms_radius: float = 3.0) -> list[tuple[int, int]]:
    """Local maxima >= threshold, greedy NMS in descending value.

    Ties in value are broken by (row, col). A candidate closer than
    ``nms_radius`` to an accepted peak is suppressed.
    """
    H_hat = np.asarray(H_hat, dtype=np.float64)
    if H_hat.ndim == 3:
        H_hat = H_hat[:, :, 0]
    local_max = ndimage.maximum_filter(H_hat, size=3, mode="constant", cval=-np.inf)
    cand = np.argwhere((H_hat >= local_max) & (H_hat >= threshold))
    if len(cand) == 0:
        return []
    vals = H_hat[cand[:, 0], cand[:, 1]]
    order = np.lexsort((cand[:, 1], cand[:, 0], -vals))
    r2 = float(nms_radius) ** 2
    accepted: list[tuple[int, int]] = []
    acc = np.empty((len(cand), 2), dtype=np.int64)
    for idx in order:
        p = cand[idx]
        n = len(accepted)
        if n and (((acc[:n] - p) ** 2).sum(axis=1) < r2).any():
            continue
        acc[n] = p
        accepted.append((int(p[0]), int(p[1])))
    return accepted


# ---------------------------------------------------------------- classifier


def _batch(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    return img[None]


def logit_map(model: Network, image: np.ndarray) -> np.ndarray:
    out, _ = model.forward(_batch(image))
    return out[0, :, :, 0]


def classify_cells(model: Network, image: np.ndarray, positions: Sequence[tuple[int, int]]) -> list[Detection]:
    """Score each position from one full-image feature pass."""
    if len(positions) == 0:
        return []
    logits = logit_map(model, image)
    pos = np.asarray(positions, dtype=np.int64)
    scores = sigmoid(logits[pos[:, 0], pos[:, 1]])
    return [Detection(int(r), int(c), float(s)) for (r, c), s in zip(pos, scores)]


class BCEResult(NamedTuple):
    loss: float
    grad: np.ndarray
    empty: bool


def classifier_loss(scores, labels) -> BCEResult:
    """Mean binary cross-entropy; ``grad`` is w.r.t. the logits, (y_hat - y) / N."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n = scores.size
    if n == 0:
        return BCEResult(0.0, np.zeros(0), True)
    p = np.clip(scores, BCE_EPS, 1.0 - BCE_EPS)
    loss = -np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p))
    return BCEResult(float(loss), (scores - labels) / n, False)


def build_mask(detections: Sequence[Detection], size, alpha: float) -> np.ndarray:
    """1 within distance < alpha of any detection scored tumor (> 0.5), else 0."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    h, w = _shape(size)
    mask = np.zeros((h, w), dtype=np.uint8)
    reach = int(np.ceil(alpha))
    offs = np.arange(-reach, reach + 1)
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    disk = (dy * dy + dx * dx) < alpha * alpha
    for d in detections:
        if not d.is_tumor:
            continue
        r0, r1 = max(d.row - reach, 0), min(d.row + reach + 1, h)
        c0, c1 = max(d.col - reach, 0), min(d.col + reach + 1, w)
        win = disk[r0 - d.row + reach : r1 - d.row + reach, c0 - d.col + reach : c1 - d.col + reach]
        mask[r0:r1, c0:c1] |= win
    return mask


def oracle_mask(cells: Sequence[CellRecord], size, alpha: float) -> np.ndarray:
    """Mask from ground-truth tumor cells, bypassing stage 1."""
    dets = [Detection(c.row, c.col, 1.0 if c.cls.is_tumor else 0.0) for c in cells]
    return build_mask(dets, size, alpha)


# ---------------------------------------------------------------- matching


def greedy_match(pred: Sequence[tuple[int, int]], gt: Sequence[tuple[int, int]], radius: float) -> list[tuple[int, int]]:
    """One-to-one pairs (pred index, gt index) within ``radius``, ascending distance.

    Equal distances are resolved by (pred index, gt index).
    """
    if len(pred) == 0 or len(gt) == 0:
        return []
    P = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    G = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    d = np.sqrt(((P[:, None, :] - G[None, :, :]) ** 2).sum(axis=2))
    pi, gi = np.nonzero(d <= radius)
    order = np.lexsort((gi, pi, d[pi, gi]))
    used_p, used_g = set(), set()
    pairs = []
    for k in order:
        a, b = int(pi[k]), int(gi[k])
        if a in used_p or b in used_g:
            continue
        used_p.add(a)
        used_g.add(b)
        pairs.append((a, b))
    return pairs


# ---------------------------------------------------------------- training


@dataclass
class DetectParams:
    """Stage-1 hyperparameters, sized for CPU runs on the synthetic benchmarks."""

    sigma: float = 1.5
    threshold: float = 0.3
    nms_radius: float = 3.5
    alpha: float = 3.0
    match_radius: float = 3.0
    det_epochs: int = 60
    det_lr: float = 0.001
    det_batch: int = 4
    cls_epochs: int = 60
    cls_lr: float = 0.01
    cls_batch: int = 4
    optimizer: str = "adam"
    momentum: float = 0.9
    augment: bool = True
    seed: int = 0


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)
    header: tuple[str, ...] = ("epoch", "loss")

    def add(self, *row):
        self.rows.append(row)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(self.header) + "\n")
            for row in self.rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dihedral(image: np.ndarray, k: int) -> np.ndarray:
    """k in 0..7: rotate by 90*(k % 4), transpose first when k >= 4."""
    out = np.swapaxes(image, 0, 1) if k >= 4 else image
    return np.rot90(out, k % 4, axes=(0, 1))


def dihedral_points(points: np.ndarray, shape: tuple[int, int], k: int) -> np.ndarray:
    """Move (row, col) points the same way :func:`dihedral` moves pixels."""
    h, w = shape
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    if k >= 4:
        pts = pts[:, ::-1]
        h, w = w, h
    for _ in range(k % 4):
        # np.rot90 (counter-clockwise): new[r, c] = old[c, w-1-r]
        pts = np.stack([w - 1 - pts[:, 1], pts[:, 0]], axis=1)
        h, w = w, h
    return pts


def annotated(samples: Sequence[Sample]) -> list[Sample]:
    out = [s for s in samples if s.cells is not None]
    if not out:
        raise ConfigError("no cell-annotated samples: stage-1 training needs the annotated subset")
    return out


def train_detector(samples: Sequence[Sample], hp: DetectParams) -> tuple[Network, TrainLog]:
    """Fit the heatmap regressor on annotated samples (per-sample squared error, batch mean)."""
    train = annotated(samples)
    net = Network(detector_topology(), seed=hp.seed)
    log_ = TrainLog()
    if hp.det_epochs == 0:
        return net, log_
    images = [np.asarray(s.image) for s in train]
    heats = [render_gt_heatmap(s.cells, s.shape, hp.sigma)[:, :, None] for s in train]
    rng = np.random.default_rng([hp.seed, 11])
    opt = make_optimizer(hp.optimizer, hp.det_lr, hp.momentum)
    for epoch in range(1, hp.det_epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), hp.det_batch):
            idx = order[start : start + hp.det_batch]
            ks = rng.integers(0, 8, size=len(idx)) if hp.augment else np.zeros(len(idx), int)
            x = np.stack([dihedral(images[i], k) for i, k in zip(idx, ks)])
            y = np.stack([dihedral(heats[i], k) for i, k in zip(idx, ks)])
            out, tape = net.forward(x)
            loss, g = detection_loss(y, out)
            n = len(idx)
            grad = net.backward(tape, g / n)
            net.params = opt.step(net.params, grad)
            total += loss
        log_.add(epoch, total / len(train))
    return net, log_


def predict_heatmap(detector: Network, image: np.ndarray) -> np.ndarray:
    out, _ = detector.forward(_batch(image))
    return out[0, :, :, 0]


def detect_positions(detector: Network, image: np.ndarray, hp: DetectParams) -> list[tuple[int, int]]:
    return find_peaks(predict_heatmap(detector, image), hp.threshold, hp.nms_radius)


def classifier_targets(detector: Network | None, sample: Sample, hp: DetectParams) -> tuple[np.ndarray, np.ndarray]:
    """Detected positions matched to GT cells within match_radius, with tumor labels.

    With ``detector=None`` the GT positions themselves are used.
    """
    if detector is None:
        pos = np.array([(c.row, c.col) for c in sample.cells], dtype=np.int64).reshape(-1, 2)
        return pos, np.array([1.0 if c.cls.is_tumor else 0.0 for c in sample.cells])
    found = detect_positions(detector, sample.image, hp)
    gt = [(c.row, c.col) for c in sample.cells]
    pairs = greedy_match(found, gt, hp.match_radius)
    pos = np.array([found[a] for a, _ in pairs], dtype=np.int64).reshape(-1, 2)
    lab = np.array([1.0 if sample.cells[b].cls.is_tumor else 0.0 for _, b in pairs])
    return pos, lab


def train_classifier(samples: Sequence[Sample], detector: Network | None, hp: DetectParams) -> tuple[Network, TrainLog]:
    """BCE at detector outputs matched to GT; unmatched detections are left out."""
    train = annotated(samples)
    net = Network(classifier_topology(), seed=hp.seed + 1)
    log_ = TrainLog()
    if hp.cls_epochs == 0:
        return net, log_
    targets = [classifier_targets(detector, s, hp) for s in train]
    images = [np.asarray(s.image) for s in train]
    rng = np.random.default_rng([hp.seed, 12])
    opt = make_optimizer(hp.optimizer, hp.cls_lr, hp.momentum)
    for epoch in range(1, hp.cls_epochs + 1):
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for start in range(0, len(order), hp.cls_batch):
            idx = order[start : start + hp.cls_batch]
            ks = rng.integers(0, 8, size=len(idx)) if hp.augment else np.zeros(len(idx), int)
            x = np.stack([dihedral(images[i], k) for i, k in zip(idx, ks)])
            out, tape = net.forward(x)
            b_idx, rows, cols, labels = [], [], [], []
            for j, (i, k) in enumerate(zip(idx, ks)):
                pos, lab = targets[i]
                if len(pos) == 0:
                    continue
                p = dihedral_points(pos, images[i].shape[:2], k)
                b_idx.append(np.full(len(p), j))
                rows.append(p[:, 0])
                cols.append(p[:, 1])
                labels.append(lab)
            if not b_idx:
                continue
            b_idx, rows, cols = np.concatenate(b_idx), np.concatenate(rows), np.concatenate(cols)
            labels = np.concatenate(labels)
            res = classifier_loss(sigmoid(out[b_idx, rows, cols, 0]), labels)
            g = np.zeros_like(out)
            np.add.at(g, (b_idx, rows, cols, 0), res.grad)
            net.params = opt.step(net.params, net.backward(tape, g))
            total += res.loss * len(labels)
            count += len(labels)
        log_.add(epoch, total / max(count, 1))
    return net, log_


@dataclass
class Stage1:
    detector: Network
    classifier: Network
    params: DetectParams

    def detect(self, image: np.ndarray) -> list[Detection]:
        return classify_cells(self.classifier, image, detect_positions(self.detector, image, self.params))

    def mask(self, image: np.ndarray) -> np.ndarray:
        return build_mask(self.detect(image), np.asarray(image).shape[:2], self.params.alpha)


def train_stage1(samples: Sequence[Sample], hp: DetectParams) -> tuple[Stage1, TrainLog, TrainLog]:
    """Detector first, then the classifier on the detector's outputs."""
    detector, det_log = train_detector(samples, hp)
    classifier, cls_log = train_classifier(samples, detector, hp)
    return Stage1(detector, classifier, hp), det_log, cls_log


def params_dict(hp) -> dict:
    return asdict(hp)
