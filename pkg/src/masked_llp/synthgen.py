"""Seeded synthetic core images with known cells, classes and proportions.

Channel 0 plays the positivity stain, channel 1 a tumor marker and channel 2
a counterstain that lights up non-tumor cells. Confusable non-tumor cells
borrow the positive cells' channel-0 intensity, so a color-only read of
positivity over the whole image is biased by them.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np

from .core import (
    INTERVAL_ORDER,
    INTERVALS,
    CellClass,
    CellRecord,
    IntervalId,
    Sample,
    interval_of,
    quantize,
    save_dataset,
)

MAX_PLACEMENT_ATTEMPTS = 100_000
PROFILES = ("easy", "imbalanced", "distractor")
ANNOTATED_FRACTION = 0.05
GENERATOR_META = "generator.json"


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Appearance:
    pos_intensity: tuple[float, float, float] = (0.9, 0.7, 0.3)
    neg_intensity: tuple[float, float, float] = (0.3, 0.7, 0.3)
    nontumor_intensity: tuple[float, float, float] = (0.3, 0.3, 0.7)
    noise_std: float = 0.05
    confusability: float = 0.0
    # per-cell multiplicative jitter of the blob color (std, fraction of color)
    intensity_jitter: float = 0.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class GenConfig:
    seed: int
    grid_size: int
    n_tumor: int
    n_nontumor: int
    target_r: float
    min_separation: float
    cell_radius: float
    appearance: Appearance = field(default_factory=Appearance)
    sample_id: str = "sample"

    def validate(self) -> None:
        if self.n_tumor < 1:
            raise ValueError("n_tumor must be >= 1")
        if self.n_nontumor < 0:
            raise ValueError("n_nontumor must be >= 0")
        if not 0.0 <= self.target_r <= 1.0:
            raise ValueError(f"target_r must lie in [0, 1], got {self.target_r}")
        if self.cell_radius <= 0 or self.grid_size <= 2 * self.cell_radius:
            raise ValueError("grid_size must exceed the cell diameter")
        if not 0.0 <= self.appearance.confusability <= 1.0:
            raise ValueError("confusability must lie in [0, 1]")
        if self.appearance.noise_std < 0:
            raise ValueError("noise_std must be >= 0")


def positive_count(target_r: float, n_tumor: int) -> int:
    """round-half-up(target_r * n_tumor), evaluated on the decimal repr of target_r."""
    exact = Decimal(repr(float(target_r))) * n_tumor
    return int(exact.to_integral_value(rounding=ROUND_HALF_UP))


def place_cells(rng: np.random.Generator, n: int, size: int, min_sep: float, margin: int) -> np.ndarray:
    """Rejection-sample ``n`` integer positions with pairwise distance >= min_sep."""
    lo, hi = margin, size - 1 - margin
    pts = np.empty((n, 2), dtype=np.int64)
    placed = 0
    attempts = 0
    min_sep2 = float(min_sep) ** 2
    while placed < n:
        if attempts >= MAX_PLACEMENT_ATTEMPTS:
            raise GenerationError(
                f"could not place {n} cells at separation {min_sep} on a {size}x{size} grid "
                f"after {MAX_PLACEMENT_ATTEMPTS} attempts; use a larger grid"
            )
        attempts += 1
        p = rng.integers(lo, hi + 1, size=2)
        if placed:
            d2 = ((pts[:placed] - p) ** 2).sum(axis=1)
            if d2.min() < min_sep2:
                continue
        pts[placed] = p
        placed += 1
    return pts


def render(
    size: int,
    positions: np.ndarray,
    colors: np.ndarray,
    cell_radius: float,
    background,
    noise_std: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Gaussian blobs (sigma = radius/2, cut at 3 sigma) composited over a flat background."""
    sigma = cell_radius / 2.0
    reach = int(math.ceil(3 * sigma))
    alpha = np.zeros((size, size))
    color = np.tile(np.asarray(background, dtype=np.float64), (size, size, 1))
    offs = np.arange(-reach, reach + 1)
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    d2 = dy**2 + dx**2
    blob = np.where(d2 <= (3 * sigma) ** 2, np.exp(-d2 / (2 * sigma**2)), 0.0)
    for (r, c), col in zip(positions, colors):
        r0, r1 = max(r - reach, 0), min(r + reach + 1, size)
        c0, c1 = max(c - reach, 0), min(c + reach + 1, size)
        b = blob[r0 - r + reach : r1 - r + reach, c0 - c + reach : c1 - c + reach]
        win = alpha[r0:r1, c0:c1]
        take = b > win
        win[take] = b[take]
        color[r0:r1, c0:c1][take] = col
    bg = np.asarray(background, dtype=np.float64)
    img = bg + alpha[:, :, None] * (color - bg)
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return quantize(np.clip(img, 0.0, 1.0))


def generate_sample(cfg: GenConfig) -> Sample:
    """Pure function of ``cfg``: same config, bit-identical sample."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    app = cfg.appearance
    n_pos = positive_count(cfg.target_r, cfg.n_tumor)
    n_neg = cfg.n_tumor - n_pos
    n_all = cfg.n_tumor + cfg.n_nontumor
    margin = int(math.ceil(cfg.cell_radius))
    positions = place_cells(rng, n_all, cfg.grid_size, cfg.min_separation, margin)

    classes = np.array(
        [CellClass.POS_TUMOR] * n_pos + [CellClass.NEG_TUMOR] * n_neg + [CellClass.NON_TUMOR] * cfg.n_nontumor,
        dtype=object,
    )
    classes = classes[rng.permutation(n_all)]
    base = {
        CellClass.POS_TUMOR: np.asarray(app.pos_intensity, dtype=np.float64),
        CellClass.NEG_TUMOR: np.asarray(app.neg_intensity, dtype=np.float64),
        CellClass.NON_TUMOR: np.asarray(app.nontumor_intensity, dtype=np.float64),
    }
    confusable = rng.random(n_all) < app.confusability
    colors = np.empty((n_all, 3))
    jit = rng.normal(0.0, app.intensity_jitter, size=(n_all, 3)) if app.intensity_jitter > 0 else np.zeros((n_all, 3))
    for i, cls in enumerate(classes):
        col = base[cls].copy()
        if cls is CellClass.NON_TUMOR and confusable[i]:
            col[0] = base[CellClass.POS_TUMOR][0]
        colors[i] = np.clip(col * (1.0 + jit[i]), 0.0, 1.0)

    image = render(cfg.grid_size, positions, colors, cfg.cell_radius, app.background, app.noise_std, rng)
    cells = tuple(CellRecord(int(r), int(c), cls) for (r, c), cls in zip(positions, classes))
    true_r = n_pos / cfg.n_tumor
    return Sample(cfg.sample_id, image, interval_of(true_r), true_r, cells=cells)


# ---------------------------------------------------------------- benchmarks


@dataclass(frozen=True)
class Profile:
    name: str
    n_samples: int
    interval_weights: tuple[int, int, int, int, int]
    grid_size: int
    cell_radius: float
    min_separation: float
    n_tumor: tuple[int, int]
    # non-tumor count = ceil(u * n_tumor), u ~ Uniform(lo, hi)
    nontumor_ratio: tuple[float, float]
    appearance: Appearance
    # I0_1 samples get a strictly positive proportion (needs n_tumor >= 100)
    narrow_nonzero: bool = False


BENCHMARKS: dict[str, Profile] = {
    "easy": Profile(
        "easy", 200, (1, 1, 1, 1, 1), grid_size=64, cell_radius=3, min_separation=7,
        n_tumor=(18, 28), nontumor_ratio=(0.15, 0.35),
        appearance=Appearance(noise_std=0.05, confusability=0.0),
    ),
    "imbalanced": Profile(
        "imbalanced", 300, (8, 6, 2, 1, 3), grid_size=80, cell_radius=2, min_separation=5,
        n_tumor=(100, 115), nontumor_ratio=(0.0, 0.08),
        appearance=Appearance(noise_std=0.08, confusability=0.0, intensity_jitter=0.1),
        narrow_nonzero=True,
    ),
    "distractor": Profile(
        "distractor", 200, (1, 1, 1, 1, 1), grid_size=80, cell_radius=3, min_separation=7,
        n_tumor=(12, 20), nontumor_ratio=(0.5, 1.5),
        appearance=Appearance(noise_std=0.05, confusability=0.5),
    ),
}


def _interval_schedule(weights, n: int) -> list[IntervalId]:
    """Per-interval counts proportional to ``weights``, largest-remainder rounding."""
    total = sum(weights)
    raw = [w * n / total for w in weights]
    counts = [int(math.floor(x)) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: (counts[i] - raw[i], i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    out = []
    for iid, c in zip(INTERVAL_ORDER, counts):
        out.extend([iid] * c)
    return out


def _positive_choices(interval: IntervalId, n_tumor: int, nonzero: bool) -> list[int]:
    iv = INTERVALS[interval]
    ks = [k for k in range(n_tumor + 1) if iv.contains(k / n_tumor)]
    if nonzero:
        ks = [k for k in ks if k > 0]
    return ks


def sample_seed(seed: int, index: int) -> int:
    """Per-sample 64-bit seed derived from (benchmark seed, sample index)."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint64)[0])


def benchmark_config(profile: Profile, seed: int, index: int, interval: IntervalId) -> GenConfig:
    sseed = sample_seed(seed, index)
    rng = np.random.default_rng([sseed, 1])
    lo, hi = profile.n_tumor
    nonzero = profile.narrow_nonzero and interval is IntervalId.I0_1
    if nonzero:
        lo = max(lo, 100)
    n_tumor = int(rng.integers(lo, hi + 1))
    ks = _positive_choices(interval, n_tumor, nonzero)
    if not ks:
        raise GenerationError(f"no positive count puts {n_tumor} tumor cells in {interval.value}")
    k = ks[int(rng.integers(len(ks)))]
    u = rng.uniform(*profile.nontumor_ratio)
    n_nontumor = int(math.ceil(u * n_tumor))
    return GenConfig(
        seed=sseed,
        grid_size=profile.grid_size,
        n_tumor=n_tumor,
        n_nontumor=n_nontumor,
        target_r=k / n_tumor,
        min_separation=profile.min_separation,
        cell_radius=profile.cell_radius,
        appearance=profile.appearance,
        sample_id=f"{profile.name}-{index:04d}",
    )


def benchmark_samples(profile: str | Profile, seed: int, n_samples: int | None = None) -> list[Sample]:
    """Build a benchmark in memory.

    The first 5% of samples keep their cells as training annotations; the
    rest carry them only as oracle cells.
    """
    prof = BENCHMARKS[profile] if isinstance(profile, str) else profile
    n = prof.n_samples if n_samples is None else n_samples
    schedule = _interval_schedule(prof.interval_weights, n)
    order = np.random.default_rng(seed).permutation(n)
    n_annotated = max(1, int(math.ceil(ANNOTATED_FRACTION * n)))
    samples = []
    for i in range(n):
        cfg = benchmark_config(prof, seed, i, schedule[order[i]])
        s = generate_sample(cfg)
        if i >= n_annotated:
            s = replace(s, cells=None, oracle_cells=s.cells)
        samples.append(s)
    return samples


def geometry(profile: str | Profile) -> dict:
    """Stage-1 geometry implied by a profile: sigma = r/2, alpha = r, NMS radius = separation/2."""
    prof = BENCHMARKS[profile] if isinstance(profile, str) else profile
    return {
        "sigma": prof.cell_radius / 2.0,
        "alpha": float(prof.cell_radius),
        "nms_radius": prof.min_separation / 2.0,
    }


def generate_benchmark(profile: str, seed: int, out: str | Path, n_samples: int | None = None) -> Path:
    """Write a benchmark dataset plus ``generator.json`` describing how it was made."""
    if profile not in BENCHMARKS:
        raise ValueError(f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
    prof = BENCHMARKS[profile]
    root = save_dataset(benchmark_samples(prof, seed, n_samples), out)
    meta = {
        "profile": profile,
        "seed": seed,
        "n_samples": prof.n_samples if n_samples is None else n_samples,
        "grid_size": prof.grid_size,
        "cell_radius": prof.cell_radius,
        "min_separation": prof.min_separation,
        "geometry": geometry(prof),
    }
    (root / GENERATOR_META).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return root


def read_generator_meta(path: str | Path) -> dict | None:
    meta = Path(path) / GENERATOR_META
    if not meta.exists():
        return None
    return json.loads(meta.read_text())
