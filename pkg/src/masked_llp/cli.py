"""Command line: generate | train | eval | plot-losses | visualize.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .core import DatasetError, load_dataset, write_netpbm
from .detect import ConfigError, Stage1, train_classifier, train_stage1
from .evaluation import cross_validate, format_table
from .losses import plot_loss_curves
from .nn import load_checkpoint, save_checkpoint
from .pipeline import MaskMode, full_mask, prepare_masks, sample_oracle_mask
from .propnet import export_visualization, forward, train_proportion
from .synthgen import PROFILES, generate_benchmark, read_generator_meta

log = logging.getLogger("masked_llp")

CHECKPOINTS = ("detector", "classifier", "proportion")


def _threads(n: int):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# ---------------------------------------------------------------- config assembly


def build_config(args) -> RunConfig:
    """File values, then MASKED_LLP_SEED, then explicit flags.

    Stage-1 geometry (sigma, alpha, nms_radius) not set in the file is taken
    from the dataset's ``generator.json`` when present.
    """
    doc = {}
    if getattr(args, "config", None):
        cfg = RunConfig.load(args.config)
        doc = json.loads(Path(args.config).read_text())
    else:
        cfg = RunConfig()
    cfg = cfg.with_seed_from_env()

    paths = cfg.paths
    if getattr(args, "dataset", None):
        paths = replace(paths, dataset=str(args.dataset))
    if getattr(args, "out", None):
        paths = replace(paths, output=str(args.out))
    if getattr(args, "checkpoints", None):
        paths = replace(paths, checkpoints=str(args.checkpoints))
    cfg = replace(cfg, paths=paths)

    for flag, attr in (("loss_mode", "loss_mode"), ("mask_mode", "mask_mode"), ("seed", "seed"),
                       ("folds", "folds"), ("threads", "threads")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg = replace(cfg, **{attr: value})
    det_over = {k: getattr(args, k) for k in ("det_epochs", "cls_epochs") if getattr(args, k, None) is not None}
    prop_over = {}
    if getattr(args, "epochs", None) is not None:
        prop_over["epochs"] = args.epochs

    explicit = set(doc.get("detect", {})) | set(det_over)
    if cfg.paths.dataset:
        meta = read_generator_meta(cfg.paths.dataset)
        if meta:
            for key, value in meta["geometry"].items():
                if key not in explicit:
                    det_over[key] = value
    cfg = replace(cfg, detect=replace(cfg.detect, **det_over), proportion=replace(cfg.proportion, **prop_over))
    cfg.validate()
    return cfg


def _require(value, what: str):
    if not value:
        raise ConfigError(f"missing {what}")
    return value


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    root = generate_benchmark(args.profile, args.seed, args.out, args.n_samples)
    n = len(json.loads((root / "manifest.json").read_text()))
    print(f"wrote {n} samples to {root}")
    return 0


def cmd_train(args) -> int:
    cfg = build_config(args)
    dataset = _require(cfg.paths.dataset, "--dataset")
    out = Path(_require(cfg.paths.output, "--out"))
    ckpt_dir = Path(cfg.paths.checkpoints or out / "checkpoints")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(dataset)
    pipe = cfg.pipeline()
    hp_det = replace(cfg.detect, seed=cfg.seed)

    with _threads(cfg.threads):
        if pipe.mask_mode is MaskMode.MASKED:
            train_set = [s for s in samples if s.cells is not None]
            if not train_set:
                raise ConfigError(
                    "mask mode 'masked' needs cell-annotated samples to train the detector; "
                    "annotate some samples or use --mask-mode oracle-mask / unmasked"
                )
            stage1, det_log, cls_log = train_stage1(train_set, hp_det)
            save_checkpoint(ckpt_dir / "detector.ckpt", stage1.detector, role="detector",
                            seed=cfg.seed, hyperparams=asdict(hp_det))
            save_checkpoint(ckpt_dir / "classifier.ckpt", stage1.classifier, role="classifier",
                            seed=cfg.seed, hyperparams=asdict(hp_det))
            det_log.to_csv(out / "detector_loss.csv")
            cls_log.to_csv(out / "classifier_loss.csv")
            masks, _ = prepare_masks(samples, pipe, stage1)
        else:
            if pipe.mask_mode is MaskMode.ORACLE:
                train_set = [s for s in samples if s.cells is not None]
                if train_set:
                    # detector bypassed: the classifier learns at ground-truth positions
                    classifier, cls_log = train_classifier(train_set, None, hp_det)
                    save_checkpoint(ckpt_dir / "classifier.ckpt", classifier, role="classifier",
                                    seed=cfg.seed, hyperparams=asdict(hp_det))
                    cls_log.to_csv(out / "classifier_loss.csv")
            masks, _ = prepare_masks(samples, pipe)

        hp_prop = replace(cfg.proportion, seed=cfg.seed)
        model, prop_log = train_proportion(samples, masks, pipe.loss_mode, hp_prop)
    save_checkpoint(ckpt_dir / "proportion.ckpt", model, role="proportion", seed=cfg.seed,
                    hyperparams=asdict(hp_prop), loss_mode=pipe.loss_mode.value,
                    mask_mode=pipe.mask_mode.value, alpha=cfg.detect.alpha)
    prop_log.to_csv(out / "proportion_log.csv")
    (out / "config.json").write_text(cfg.to_json())
    for name in CHECKPOINTS:
        path = ckpt_dir / f"{name}.ckpt"
        if path.exists():
            print(f"{name}: {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = build_config(args)
    dataset = _require(cfg.paths.dataset, "--dataset")
    out = Path(_require(cfg.paths.output, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    samples = load_dataset(dataset)
    with _threads(cfg.threads):
        report = cross_validate(samples, cfg.folds, cfg.pipeline())
    name = f"{cfg.loss_mode} ({cfg.mask_mode})"
    table = format_table({name: report})
    print(table, end="")
    (out / "report.txt").write_text(table)
    (out / "report.json").write_text(report.to_json())
    (out / "config.json").write_text(cfg.to_json())
    from .plotting import report_figure

    report_figure(report.to_dict(), out / "report")
    return 0


def cmd_plot_losses(args) -> int:
    written = plot_loss_curves(args.out, ppm=args.ppm)
    for kind, path in written.items():
        print(f"{kind}: {path}")
    return 0


def cmd_visualize(args) -> int:
    samples = {s.id: s for s in load_dataset(args.dataset)}
    if args.sample_id not in samples:
        raise ConfigError(f"sample {args.sample_id!r} not in {args.dataset}")
    sample = samples[args.sample_id]
    ckpt = Path(args.checkpoints)
    model, header = load_checkpoint(ckpt / "proportion.ckpt")
    mask = visualization_mask(sample, ckpt, header)
    est = forward(model, sample.image, mask)
    out = Path(args.out) / sample.id
    paths = export_visualization(est, out)
    write_netpbm(out / "image.ppm", sample.image, maxval=255)
    print(f"r_hat={est.r_hat:.4f} (true interval {sample.interval.value}) -> {out}")
    for kind, path in paths.items():
        log.info("%s: %s", kind, path)
    return 0


def load_stage1(ckpt: Path) -> Stage1:
    from .detect import DetectParams

    detector, header = load_checkpoint(ckpt / "detector.ckpt")
    classifier, _ = load_checkpoint(ckpt / "classifier.ckpt")
    return Stage1(detector, classifier, DetectParams(**header["hyperparams"]))


def visualization_mask(sample, ckpt: Path, header: dict) -> np.ndarray:
    """The mask the proportion checkpoint was trained with, rebuilt for one sample."""
    mode = MaskMode(header.get("mask_mode", "masked"))
    if mode is MaskMode.MASKED:
        return load_stage1(ckpt).mask(sample.image)
    if mode is MaskMode.ORACLE:
        return sample_oracle_mask(sample, header["alpha"])
    return full_mask(sample)


# ---------------------------------------------------------------- parser


def _add_run_flags(p: argparse.ArgumentParser, folds: bool = False) -> None:
    p.add_argument("--config", type=Path, help="JSON run config; flags override its values")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--checkpoints", type=Path)
    p.add_argument("--loss-mode", choices=["Prop", "FocalProp", "WFL"])
    p.add_argument("--mask-mode", choices=[m.value for m in MaskMode])
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="proportion-network epochs")
    p.add_argument("--det-epochs", type=int)
    p.add_argument("--cls-epochs", type=int)
    p.add_argument("--threads", type=int, help="BLAS threads (default 1, bit-reproducible)")
    if folds:
        p.add_argument("--folds", type=int)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="masked-llp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    g.add_argument("--profile", required=True, choices=PROFILES)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--n-samples", type=int, help="override the profile's sample count")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train stage 1 then stage 2; write checkpoints and logs")
    _add_run_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="k-fold cross-validated evaluation")
    _add_run_flags(e, folds=True)
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("plot-losses", help="loss curves per interval, uniform vs weighted gamma")
    pl.add_argument("--out", type=Path, required=True)
    pl.add_argument("--ppm", action="store_true", help="also write a netpbm rendering")
    pl.set_defaults(func=cmd_plot_losses)

    v = sub.add_parser("visualize", help="mask, score maps and masked overlay for one sample")
    v.add_argument("--dataset", type=Path, required=True)
    v.add_argument("--sample-id", required=True)
    v.add_argument("--checkpoints", type=Path, required=True)
    v.add_argument("--out", type=Path, required=True)
    v.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # a failing fold must still map to exit 1
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
