"""Command-line harness: train / eval / augment / flops / synth.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (ConfigError, RunConfig, config_hash, load_config,
                     synth_shifts)
from .data import DataError, DomainSet, standard_augment
from .flops import DECODERS, count_flops
from .metrics import MetricError, format_report, report_csv
from .mixing import build_augmented_batch
from .network import SegModel
from .training import TrainError, evaluate, train


def _build_model(cfg: RunConfig) -> SegModel:
    return SegModel(cfg.encoder, cfg.decoder, seed=cfg.training.seed)


def _load_train_domains(cfg: RunConfig):
    root = Path(cfg.data.root)
    if not root.is_dir():
        raise ConfigError(f"data root {root} does not exist")
    if not cfg.data.sources or not cfg.data.target:
        raise ConfigError("config must list data.sources and data.target")
    nc = cfg.decoder.num_classes
    sources = {name: D.load_domain(root / name, "source", num_classes=nc)
               for name in cfg.data.sources}
    target = D.load_domain(root / cfg.data.target, "target",
                           n_labelled=cfg.data.target_labelled, num_classes=nc)
    rng = np.random.default_rng([cfg.training.seed, 99])
    eval_samples, train_samples = D.split_target(target, cfg.data.target_labelled, rng)
    name = cfg.data.target
    target_eval = DomainSet(name=f"{name}_eval", samples=eval_samples,
                            role="target", n_labelled=len(eval_samples))
    target_train = DomainSet(name=f"{name}_train", samples=train_samples,
                             role="target")
    return sources, target_train, target_eval


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = _build_model(cfg)
    chash = config_hash(cfg)
    if cfg.training.iterations == 0:
        save_checkpoint(model, out / "final.ckpt", iteration=0, config_hash=chash)
        print(f"initialized checkpoint written to {out / 'final.ckpt'}")
        return 0
    sources, target_train, target_eval = _load_train_domains(cfg)
    state = train(model, sources, target_train, target_eval, cfg.training,
                  method=cfg.run.method, aug=cfg.augment, log_dir=str(out),
                  progress=print)
    it, rep = state.eval_log[-1]
    save_checkpoint(model, out / "final.ckpt", iteration=it, miou=rep.miou,
                    config_hash=chash)
    best_it, best = max(state.eval_log, key=lambda e: e[1].miou)
    if (best_it, best.miou) == (it, rep.miou):
        import shutil
        shutil.copyfile(out / "final.ckpt", out / "best.ckpt")
    # otherwise the best weights are gone; record the best score anyway
    with open(out / "best.txt", "w") as f:
        f.write(f"iteration {best_it} miou {best.miou:.6f}\n")
    print(f"final mIoU {rep.miou:.4f} (best {best.miou:.4f} at {best_it})")
    return 0


def eval_report(model: SegModel, dataset: DomainSet, recalibrate: bool,
                predictor=None):
    """Evaluation used by cmd_eval; ``predictor`` is a test hook mapping an
    image to a label map (replacing the model's prediction)."""
    from .metrics import ConfusionMatrix, iou_report
    labelled = [s for s in dataset.samples if s.label is not None]
    if not labelled:
        raise DataError(f"dataset {dataset.name} has no labelled samples")
    if recalibrate and predictor is None:
        from .network import recalibrate_norm
        recalibrate_norm(model, np.stack([s.image for s in labelled]))
    cm = ConfusionMatrix(model.num_classes)
    for s in labelled:
        pred = predictor(s) if predictor else model.predict(s.image)
        cm.update(pred, s.label)
    return iou_report(cm)


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    dataset = D.load_domain(args.dataset, "target",
                            num_classes=model.num_classes)
    recal = not args.no_recalibrate
    rep = eval_report(model, dataset, recalibrate=recal)
    mode = "recalibrated" if recal else "stored-statistics"
    text = f"normalization: {mode}\n" + format_report(rep)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(Path(args.out) / "report.txt", "w") as f:
            f.write(text + "\n")
        with open(Path(args.out) / "report.csv", "w") as f:
            f.write(f"# normalization: {mode}\n" + report_csv(rep) + "\n")
    return 0


def cmd_augment(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sources, target_train, _ = _load_train_domains(cfg)
    model = _build_model(cfg)
    rng_aug = np.random.default_rng([cfg.training.seed, 2])
    rng_mix = np.random.default_rng([cfg.training.seed, 3])
    names = sorted(sources)
    count = min(args.count, len(target_train.samples))
    written = 0
    for i in range(count):
        tgt = standard_augment(target_train.samples[i], cfg.augment, rng_aug)
        crops = [(n, standard_augment(sources[n].samples[i % len(sources[n].samples)],
                                      cfg.augment, rng_aug)) for n in names]
        batch = build_augmented_batch(crops, tgt.image, model, rng_mix,
                                      target_id=tgt.id,
                                      confidence_threshold=cfg.training.confidence_threshold)
        for s in batch.samples:
            stem = f"mix_{i:03d}_{s.source_domain}"
            D.save_image(out / f"{stem}_image.png", s.image)
            D.save_label(out / f"{stem}_label.png", s.label)
            D.save_label(out / f"{stem}_mask.png", s.mask)
            written += 1
    print(f"wrote {written} augmented triples to {out}")
    return 0


def cmd_flops(args) -> int:
    which = DECODERS if args.decoder == "all" else (args.decoder,)
    reports = [(d, count_flops(d, args.height, args.width)) for d in which]
    for name, rep in reports:
        print(f"== {name} ==")
        print(rep.as_text())
    if len(reports) > 1:
        order = sorted(reports, key=lambda r: r[1].total_flops)
        print("ordering: " + " < ".join(n for n, _ in order))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for name, rep in reports:
            with open(Path(args.out) / f"flops_{name}.csv", "w") as f:
                f.write(rep.as_csv() + "\n")
    return 0


def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    sc = cfg.synth
    out = Path(args.out or cfg.run.out_dir)
    shifts = synth_shifts(sc.n_sources)
    spec = D.SynthSpec(num_classes=sc.num_classes, size=sc.size,
                       n_images=sc.n_images, shifts=shifts, seed=sc.seed)
    for k in range(sc.n_sources):
        dset = D.synth_generate(spec, k, role="source", name=f"src{k}")
        D.save_domain(dset, out / f"src{k}")
    target = D.synth_generate(spec, sc.n_sources, role="target", name="target")
    D.save_domain(target, out / "target")
    print(f"wrote {sc.n_sources} source domains + 1 target domain to {out}")
    return 0


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config, args.set or [])
    if getattr(args, "seed", None) is not None:
        from .training import HyperParams
        import dataclasses
        cfg.training = dataclasses.replace(cfg.training, seed=args.seed)
        cfg.synth = dataclasses.replace(cfg.synth, seed=args.seed)
    if getattr(args, "out", None):
        cfg.run.out_dir = args.out
    return cfg


def _add_common(p):
    p.add_argument("--config", default=None, help="dotted-key config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, repeatable")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaseg",
        description="meta-learning domain-adaptive segmentation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training job")
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a labelled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="domain directory")
    p.add_argument("--no-recalibrate", action="store_true",
                   help="keep stored normalization statistics")
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("augment", help="write mixed-sample inspection triples")
    _add_common(p)
    p.add_argument("--count", type=int, default=1, help="target images to mix")
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("flops", help="analytic decoder cost comparison")
    p.add_argument("--decoder", default="all", choices=list(DECODERS) + ["all"])
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--width", type=int, default=2048)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("synth", help="generate the synthetic multi-domain dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainError, MetricError, CheckpointError, T.ShapeError,
            T.NumericError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main(argv=sys.argv[1:]))
