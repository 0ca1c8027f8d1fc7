"""Command-line entry point: ``landslide-seg <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 acceptance
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .config import ConfigError, RunConfig, dump_config, from_dict, load_config
from .validation import DataError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_ACCEPTANCE = 4

log = logging.getLogger("landslide_seg")


def _overrides(args) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    for flag, key in (("beta", "loss.beta"), ("alpha", "loss.alpha"), ("epochs", "train.epochs"),
                      ("seed", "train.seed"), ("precision", "precision"),
                      ("output_dir", "output_dir"), ("root", "dataset_root")):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = str(value)
    return out


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _config_from_checkpoint(path: Path, args) -> RunConfig:
    from .checkpoint import load_checkpoint_dir

    manifest = json.loads((Path(path) / "manifest.json").read_text())
    cfg = from_dict(manifest["meta"]["config"])
    overrides = _overrides(args)
    if overrides:
        from .config import apply_overrides
        cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def _trainer_from_checkpoint(path, args):
    from .training import Trainer

    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise DataError(f"no checkpoint manifest under {path}")
    cfg = _config_from_checkpoint(path, args)
    return Trainer(cfg).load(path), cfg


def cmd_synth(args) -> int:
    from .data.scene import write_scene
    from .data.synthetic import generate_synthetic_scene

    cfg = _config(args)
    root = Path(cfg.dataset_root)
    root.mkdir(parents=True, exist_ok=True)
    count = args.count if args.count is not None else cfg.synthetic_count
    for i in range(count):
        sample = generate_synthetic_scene(replace(cfg.synthetic, seed=cfg.synthetic.seed + i),
                                          contrastive=cfg.contrastive)
        write_scene(sample, root)
    dump_config(cfg, root / "synth_config.yaml")
    print(f"wrote {count} scenes to {root}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .data.preprocess import prepare_sample
    from .data.scene import load_dataset, write_scene

    cfg = _config(args)
    out = Path(args.out)
    samples = load_dataset(cfg.dataset_root)
    for s in samples:
        write_scene(prepare_sample(s, equalize=cfg.train.equalize, method=cfg.dem_interpolation), out)
    print(f"preprocessed {len(samples)} scenes into {out} "
          f"(dem={cfg.dem_interpolation}, equalize={cfg.train.equalize})")
    return EXIT_OK


def cmd_split(args) -> int:
    from .data.scene import list_scene_ids
    from .data.split import split_dataset

    cfg = _config(args)
    ids = list_scene_ids(cfg.dataset_root)
    split = split_dataset(ids, cfg.split_ratio, cfg.folds, cfg.train.seed)
    out = Path(args.out or Path(cfg.dataset_root) / "split.csv")
    split.write(out)
    print(f"wrote {cfg.folds}-fold split of {len(ids)} scenes to {out}")
    return EXIT_OK


def _load_split(cfg: RunConfig, ids: List[str], path: Optional[str]):
    from .data.split import DatasetSplit, split_dataset

    if path:
        return DatasetSplit.read(path, cfg.split_ratio)
    default = Path(cfg.dataset_root) / "split.csv"
    if default.is_file():
        return DatasetSplit.read(default, cfg.split_ratio)
    return split_dataset(ids, cfg.split_ratio, cfg.folds, cfg.train.seed)


def cmd_train(args) -> int:
    from .data.scene import load_dataset
    from .metrics import summarize_reports
    from .training import run_fold

    cfg = _config(args)
    samples = load_dataset(cfg.dataset_root)
    split = _load_split(cfg, [s.id for s in samples], args.split)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    folds = range(split.fold_count) if args.fold is None else [args.fold]
    results = []
    for f in folds:
        res = run_fold(f, split, samples, cfg, out / f"fold{f}", resume=args.resume)
        results.append(res)
        print(f"fold {f}: " + " ".join(f"{k}={v:.4f}" for k, v in res.report.as_dict().items()))
    summary = summarize_reports([r.report for r in results])
    (out / "summary.json").write_text(json.dumps(
        {"folds": [r.report.to_record() for r in results], "summary": summary}, indent=2))
    print("mean " + " ".join(f"{k}={v['mean']:.4f}±{v['std']:.4f}" for k, v in summary.items()))
    return EXIT_OK


def _scenes(cfg: RunConfig, root: Optional[str]):
    from .data.preprocess import prepare_sample
    from .data.scene import load_dataset

    samples = load_dataset(root or cfg.dataset_root)
    return [prepare_sample(s, equalize=cfg.train.equalize, method=cfg.dem_interpolation)
            for s in samples]


def cmd_eval(args) -> int:
    trainer, cfg = _trainer_from_checkpoint(args.checkpoint, args)
    scenes = _scenes(cfg, args.root)
    if args.split:
        from .data.split import DatasetSplit
        keep = set(DatasetSplit.read(args.split).partition(args.fold or 0, args.partition))
        scenes = [s for s in scenes if s.id in keep]
    report = trainer.evaluate(scenes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_predict(args) -> int:
    from PIL import Image

    from .viz import render_overlay

    trainer, cfg = _trainer_from_checkpoint(args.checkpoint, args)
    scenes = _scenes(cfg, args.root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    probs = trainer.predict_proba(scenes)
    for s, p in zip(scenes, probs):
        mask = (p > 0.5).astype(np.uint8)
        Image.fromarray(mask * 255).save(out / f"{s.id}_mask.png")
        render_overlay(s.hrsi, out / f"{s.id}_overlay.png", prediction=mask, outline=s.label)
    print(f"wrote predictions for {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_gradcam(args) -> int:
    import torch

    from .training import dem_to_tensor, hrsi_to_tensor
    from .viz import grad_cam, list_layers, render_overlay

    trainer, cfg = _trainer_from_checkpoint(args.checkpoint, args)
    model = trainer.model
    if args.layer not in dict(model.named_modules()) or not args.layer:
        valid = list_layers(model)
        print(f"error: unknown layer {args.layer!r}. Valid layers:\n  " + "\n  ".join(valid),
              file=sys.stderr)
        return EXIT_CONFIG
    scenes = _scenes(cfg, args.root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        hrsi = hrsi_to_tensor(s.hrsi, trainer.dtype)[None]
        dem = dem_to_tensor(s.dem, trainer.dtype)[None]
        res = grad_cam(model, (hrsi, dem), args.target_class, args.layer)
        render_overlay(s.hrsi, out / f"{s.id}_gradcam.png", heatmap=res.heatmap[0], outline=s.label)
        if res.degenerate[0]:
            print(f"{s.id}: degenerate heatmap (no positive activation)")
    print(f"wrote Grad-CAM overlays for {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .acceptance import run_all

    results = run_all(only=args.only, out=sys.stdout)
    return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPTANCE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="landslide-seg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, root=True):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value, e.g. --set train.epochs=5")
        p.add_argument("--seed", type=int)
        p.add_argument("--precision", type=int, choices=(32, 64))
        if root:
            p.add_argument("--root", help="dataset root directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="interpolate DEMs and equalize optical rasters")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", help="write a cross-validation split manifest")
    common(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train one fold or all folds")
    common(p)
    p.add_argument("--split", help="split manifest (fold,id,partition)")
    p.add_argument("--fold", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split")
    p.add_argument("--fold", type=int)
    p.add_argument("--partition", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", default="eval_report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write masks and overlays")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcam", help="write Grad-CAM overlays")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layer", default="encoder.mafe.aspp")
    p.add_argument("--target-class", dest="target_class", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("selftest", help="run the acceptance checks")
    p.add_argument("--only", nargs="*", help="criterion numbers to run")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
