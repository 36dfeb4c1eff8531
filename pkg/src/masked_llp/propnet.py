"""Stage 2: positive/negative score maps, masked soft counts, proportion training."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Sample, write_netpbm
from .detect import TrainLog, dihedral
from .losses import LossMode, loss_for_interval
from .nn import Network, act, avgpool, conv, make_optimizer

SUM_EPS = 1e-12


def proportion_topology(downsample: int = 2) -> list[dict]:
    """Conv stack with ``log2(downsample)`` 2x average pools and a softplus 2-channel head."""
    if downsample < 1 or downsample & (downsample - 1):
        raise ValueError("downsample must be a power of two")
    layers = [conv(3, 8), act("relu")]
    width = 8
    d = 1
    while d < downsample:
        layers += [avgpool(2), conv(width, 16), act("relu")]
        width = 16
        d *= 2
    layers += [conv(width, 16), act("relu"), conv(16, 2, k=1), act("softplus")]
    return layers


def downsample_mask(mask: np.ndarray, d: int) -> np.ndarray:
    """d x d max-pool: a map cell is tumor if any pixel it covers is."""
    m = np.asarray(mask)
    h, w = m.shape[:2]
    if h % d or w % d:
        raise ValueError(f"mask {h}x{w} is not divisible by downsample factor {d}")
    return m.reshape(h // d, d, w // d, d).max(axis=(1, 3)).astype(np.float64)


@dataclass
class ProportionEstimate:
    s_p: float
    s_n: float
    r_hat: float
    degenerate: bool
    pos_map: np.ndarray
    neg_map: np.ndarray
    mask: np.ndarray
    downsample: int

    @property
    def masked_pos(self) -> np.ndarray:
        return self.pos_map * downsample_mask(self.mask, self.downsample)

    @property
    def masked_neg(self) -> np.ndarray:
        return self.neg_map * downsample_mask(self.mask, self.downsample)


def ratio(s_p, s_n):
    """r_hat = s_p / (s_p + s_n); 0.5 and flagged degenerate when the total is ~0."""
    s_p = np.asarray(s_p, dtype=np.float64)
    s_n = np.asarray(s_n, dtype=np.float64)
    total = s_p + s_n
    degenerate = total <= SUM_EPS
    r = np.where(degenerate, 0.5, s_p / np.where(degenerate, 1.0, total))
    return r, degenerate


def forward(model: Network, image: np.ndarray, mask: np.ndarray) -> ProportionEstimate:
    img = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    if mask.shape != img.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {img.shape[:2]}")
    d = model.downsample
    md = downsample_mask(mask, d)
    maps, _ = model.forward(img[None])
    fp, fn = maps[0, :, :, 0], maps[0, :, :, 1]
    s_p = float(np.sum(fp * md))
    s_n = float(np.sum(fn * md))
    r, deg = ratio(s_p, s_n)
    return ProportionEstimate(s_p, s_n, float(r), bool(deg), fp, fn, mask, d)


def forward_unmasked(model: Network, image: np.ndarray) -> ProportionEstimate:
    return forward(model, image, np.ones(np.asarray(image).shape[:2], dtype=np.uint8))


def predict(model: Network, images: Sequence[np.ndarray], masks: Sequence[np.ndarray], batch: int = 16):
    """Batched r_hat for many images; returns (r_hat array, degenerate array)."""
    d = model.downsample
    out_r, out_d = [], []
    for start in range(0, len(images), batch):
        x = np.stack([np.asarray(im, dtype=np.float64) for im in images[start : start + batch]])
        md = np.stack([downsample_mask(m, d) for m in masks[start : start + batch]])
        maps, _ = model.forward(x)
        s_p = np.sum(maps[..., 0] * md, axis=(1, 2))
        s_n = np.sum(maps[..., 1] * md, axis=(1, 2))
        r, deg = ratio(s_p, s_n)
        out_r.append(r)
        out_d.append(deg)
    if not out_r:
        return np.zeros(0), np.zeros(0, dtype=bool)
    return np.concatenate(out_r), np.concatenate(out_d)


def batch_loss_and_grad(
    model: Network,
    images: np.ndarray,
    masks_d: np.ndarray,
    intervals: Sequence,
    mode: LossMode | str,
    params: np.ndarray | None = None,
):
    """Mean interval loss over the non-degenerate samples and its parameter gradient.

    ``masks_d`` are already at map resolution; they enter as data, so no
    gradient flows back into whatever produced them.
    """
    maps, tape = model.forward(images, params)
    fp, fn = maps[..., 0], maps[..., 1]
    s_p = np.sum(fp * masks_d, axis=(1, 2))
    s_n = np.sum(fn * masks_d, axis=(1, 2))
    r_hat, deg = ratio(s_p, s_n)
    keep = ~deg
    n = int(keep.sum())
    if n == 0:
        return 0.0, np.zeros(model.n_params), 0
    total = 0.0
    dr = np.zeros(len(r_hat))
    for i in np.flatnonzero(keep):
        l, g = loss_for_interval(intervals[i], r_hat[i], mode)
        total += l
        dr[i] = g / n
    tot = np.where(keep, s_p + s_n, 1.0)
    ds_p = dr * s_n / tot**2
    ds_n = -dr * s_p / tot**2
    gmaps = np.empty_like(maps)
    gmaps[..., 0] = ds_p[:, None, None] * masks_d
    gmaps[..., 1] = ds_n[:, None, None] * masks_d
    return total / n, model.backward(tape, gmaps, params), n


@dataclass
class ProportionParams:
    """Stage-2 hyperparameters, sized for CPU runs on the synthetic benchmarks."""

    downsample: int = 2
    epochs: int = 20
    lr: float = 0.003
    batch: int = 16
    patience: int = 30
    val_fraction: float = 0.2
    optimizer: str = "adam"
    momentum: float = 0.9
    augment: bool = True
    seed: int = 0


def _split(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_val = int(round(val_fraction * n)) if n > 1 else 0
    n_val = min(n_val, n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def train_proportion(
    samples: Sequence[Sample],
    masks: Sequence[np.ndarray],
    mode: LossMode | str,
    hp: ProportionParams,
) -> tuple[Network, TrainLog]:
    """Minibatch descent on the mean interval loss with early stopping on a held-out 20%.

    Uses interval labels only. Returns the parameters with the best
    validation loss (or the last ones when there is no validation split).
    """
    if len(samples) == 0:
        raise ValueError("empty training set")
    if len(masks) != len(samples):
        raise ValueError(f"{len(samples)} samples but {len(masks)} masks")
    for s, m in zip(samples, masks):
        if m is None:
            raise ValueError(f"sample {s.id}: no mask")
    mode = LossMode(mode)
    model = Network(proportion_topology(hp.downsample), seed=hp.seed)
    log = TrainLog(header=("epoch", "train_loss", "val_loss", "stopped_early"))
    if hp.epochs == 0:
        return model, log

    d = model.downsample
    images = [np.asarray(s.image) for s in samples]
    masks = [np.asarray(m) for m in masks]
    intervals = [s.interval for s in samples]
    rng = np.random.default_rng([hp.seed, 21])
    tr, va = _split(len(samples), hp.val_fraction, rng)
    opt = make_optimizer(hp.optimizer, hp.lr, hp.momentum)

    def val_loss(params):
        if len(va) == 0:
            return float("nan")
        total, count = 0.0, 0
        for start in range(0, len(va), hp.batch):
            idx = va[start : start + hp.batch]
            x = np.stack([images[i] for i in idx])
            md = np.stack([downsample_mask(masks[i], d) for i in idx])
            maps, _ = model.forward(x, params)
            r, deg = ratio(np.sum(maps[..., 0] * md, axis=(1, 2)), np.sum(maps[..., 1] * md, axis=(1, 2)))
            for j, i in enumerate(idx):
                if not deg[j]:
                    total += loss_for_interval(intervals[i], r[j], mode)[0]
                    count += 1
        return total / count if count else float("nan")

    best_params, best_val, since_best = model.params.copy(), np.inf, 0
    for epoch in range(1, hp.epochs + 1):
        order = tr[rng.permutation(len(tr))]
        total, count = 0.0, 0
        for start in range(0, len(order), hp.batch):
            idx = order[start : start + hp.batch]
            ks = rng.integers(0, 8, size=len(idx)) if hp.augment else np.zeros(len(idx), int)
            x = np.stack([dihedral(images[i], k) for i, k in zip(idx, ks)])
            md = np.stack([downsample_mask(dihedral(masks[i], k), d) for i, k in zip(idx, ks)])
            loss, grad, n = batch_loss_and_grad(model, x, md, [intervals[i] for i in idx], mode)
            if n == 0:
                continue
            model.params = opt.step(model.params, grad)
            total += loss * n
            count += n
        train_loss = total / count if count else float("nan")
        vl = val_loss(model.params)
        stop = False
        if len(va):
            if vl < best_val:
                best_val, best_params, since_best = vl, model.params.copy(), 0
            else:
                since_best += 1
                stop = since_best >= hp.patience
        log.add(epoch, train_loss, vl, stop)
        if stop:
            break
    if len(va):
        model.params = best_params
    return model, log


def export_visualization(estimate: ProportionEstimate, out: str | Path) -> dict[str, Path]:
    """Mask, red positive map, blue negative map and masked overlay as netpbm, plus a JSON sidecar.

    Maps are upscaled by the model's downsample factor to image resolution.
    """
    from .plotting import colorize, overlay, upscale

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    d = estimate.downsample
    top = max(float(estimate.pos_map.max()), float(estimate.neg_map.max()))
    paths = {
        "mask": out / "mask.pgm",
        "positive": out / "positive.ppm",
        "negative": out / "negative.ppm",
        "overlay": out / "overlay.ppm",
        "sidecar": out / "estimate.json",
    }
    write_netpbm(paths["mask"], np.asarray(estimate.mask, dtype=np.float64), maxval=255)
    write_netpbm(paths["positive"], upscale(colorize(estimate.pos_map, "Reds", top), d), maxval=255)
    write_netpbm(paths["negative"], upscale(colorize(estimate.neg_map, "Blues", top), d), maxval=255)
    write_netpbm(paths["overlay"], upscale(overlay(estimate.masked_pos, estimate.masked_neg), d), maxval=255)
    sidecar = {
        "s_p": estimate.s_p,
        "s_n": estimate.s_n,
        "r_hat": estimate.r_hat,
        "degenerate": estimate.degenerate,
        "downsample": d,
    }
    paths["sidecar"].write_text(json.dumps(sidecar, indent=1) + "\n")
    return paths
