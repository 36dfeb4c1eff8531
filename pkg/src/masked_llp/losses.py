"""Proportion losses on the two-class split (r, 1-r) and their derivatives in r_hat.

Every function accepts scalars or broadcastable arrays and returns
``(loss, d loss / d r_hat)``. ``r_hat`` is clamped to ``[EPS, 1-EPS]`` first
and the derivative is evaluated at the clamped value.
"""

from __future__ import annotations

import csv
import enum
from pathlib import Path

import numpy as np

from .core import INTERVAL_ORDER, IntervalId, ProportionInterval, get_interval

EPS = 1e-7


class LossMode(str, enum.Enum):
    PROP = "Prop"
    FOCAL_PROP = "FocalProp"
    WFL = "WFL"


def clamp(r_hat):
    return np.clip(np.asarray(r_hat, dtype=np.float64), EPS, 1.0 - EPS)


def _xlogx_over(a, b):
    """a * log(a / b) with 0 * log(0 / b) := 0."""
    a = np.asarray(a, dtype=np.float64)
    safe = np.where(a > 0, a, 1.0)
    return np.where(a > 0, a * np.log(safe / b), 0.0)


def proportion_loss(r, r_hat):
    """KL((r, 1-r) || (r_hat, 1-r_hat))."""
    r = np.asarray(r, dtype=np.float64)
    rh = clamp(r_hat)
    loss = _xlogx_over(r, rh) + _xlogx_over(1.0 - r, 1.0 - rh)
    grad = -r / rh + (1.0 - r) / (1.0 - rh)
    return _out(loss), _out(grad)


def focal_factor(r, r_hat, gamma):
    """|r - r_hat|^gamma and its r_hat-derivative, with 0^0 := 1 and derivative 0 at r_hat = r."""
    r = np.asarray(r, dtype=np.float64)
    rh = clamp(r_hat)
    gamma = np.asarray(gamma, dtype=np.float64)
    diff = r - rh
    gap = np.abs(diff)
    factor = np.power(gap, gamma)
    on_gap = gap > 0
    safe_gap = np.where(on_gap, gap, 1.0)
    dfactor = np.where(on_gap & (gamma > 0), -gamma * np.sign(diff) * np.power(safe_gap, gamma - 1.0), 0.0)
    return factor, dfactor


def weighted_focal_proportion_loss(r, r_hat, gamma):
    """|r - r_hat|^gamma * KL(r || r_hat), product-rule derivative."""
    if np.any(np.asarray(gamma) < 0):
        raise ValueError("gamma must be >= 0")
    kl, dkl = proportion_loss(r, r_hat)
    f, df = focal_factor(r, r_hat, gamma)
    return _out(f * kl), _out(df * kl + f * dkl)


def mode_gamma(interval: ProportionInterval, mode: LossMode | str) -> float:
    mode = LossMode(mode)
    if mode is LossMode.PROP:
        return 0.0
    if mode is LossMode.FOCAL_PROP:
        return 2.0
    return interval.gamma


def loss_for_interval(interval: IntervalId | str | ProportionInterval, r_hat, mode: LossMode | str):
    """Loss against the interval midpoint with the mode's gamma."""
    iv = get_interval(interval)
    return weighted_focal_proportion_loss(iv.midpoint, r_hat, mode_gamma(iv, mode))


def _out(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


# ---------------------------------------------------------------- loss curves

CURVE_R_HAT = np.arange(1, 1000) / 1000.0
CURVE_MODES = (LossMode.FOCAL_PROP, LossMode.WFL)


def loss_curves(modes=CURVE_MODES, r_hat=CURVE_R_HAT) -> list[tuple[str, str, float, float, float]]:
    """Rows of (interval, mode, r_hat, loss, grad) for every interval and mode."""
    rows = []
    for mode in modes:
        for iid in INTERVAL_ORDER:
            loss, grad = loss_for_interval(iid, r_hat, mode)
            for x, l, g in zip(r_hat, loss, grad):
                rows.append((iid.value, LossMode(mode).value, float(x), float(l), float(g)))
    return rows


def plot_loss_curves(out: str | Path, ppm: bool = False) -> dict[str, Path]:
    """Write ``loss_curves.csv`` and a two-panel figure (uniform gamma=2 vs weighted)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = loss_curves()
    csv_path = out / "loss_curves.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["interval", "mode", "r_hat", "loss", "grad"])
        for iid, mode, x, l, g in rows:
            w.writerow([iid, mode, f"{x:.3f}", repr(l), repr(g)])

    from .plotting import loss_curve_figure

    written = {"csv": csv_path}
    written.update(loss_curve_figure(rows, out / "loss_curves", ppm=ppm))
    return written


def curve_gradient(interval: IntervalId | str, mode: LossMode | str, r_hat: float) -> float:
    return float(loss_for_interval(interval, r_hat, mode)[1])

