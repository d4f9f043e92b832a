"""Command-line entry point for dataset generation, training, evaluation,
gradient checking, ablations, and model inspection.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path


def _apply_thread_cap():
    cap = os.environ.get("MCVT_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mcvt",
        description="Multi-modal multi-view recognition experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic RGB-D dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4,
                   help="number of shape classes (max 4)")
    p.add_argument("--per-class", type=int, default=10)
    p.add_argument("--views", type=int, default=4)
    p.add_argument("--rig", choices=["circular", "hemi"], default="circular")
    p.add_argument("--azimuth-offset", type=float, default=0.0)
    p.add_argument("--elevation", type=float, default=30.0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("train", help="k-fold training run")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="model config JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--modality", choices=["rgb", "depth", "rgbd"], default="rgbd")
    p.add_argument("--fusion", choices=["acf", "ecf", "aef", "geef"],
                   default="geef")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.0002)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--config", help="model config JSON (default: next to ckpt)")

    p = sub.add_parser("gradcheck", help="run the gradient-check suite")
    p.add_argument("--full", action="store_true",
                   help="more instances per check")
    p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("ablate", help="fusion/views/blocks ablation sweep")
    p.add_argument("--axis", choices=["fusion", "views", "blocks"],
                   required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--config", help="base model config JSON file")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("info", help="parameter count and layer summary")
    p.add_argument("--config", help="model config JSON file")

    return parser


def _modalities(name):
    return {"rgb": ("rgb",), "depth": ("depth",),
            "rgbd": ("rgb", "depth")}[name]


def _load_model_config(path, **overrides):
    from .model import ModelConfig
    if path:
        cfg_path = Path(path)
        if not cfg_path.exists():
            raise FileNotFoundError(f"config file not found: {cfg_path}")
        with open(cfg_path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"malformed config {cfg_path}: {exc}")
        raw.update(overrides)
        return ModelConfig.from_dict(raw)
    return ModelConfig(**overrides)


def _cmd_gen_data(args):
    from . import dataset as ds
    classes = list(ds.SHAPE_CLASSES[:args.classes])
    if args.classes < 1 or args.classes > len(ds.SHAPE_CLASSES):
        raise ValueError(f"--classes must be in [1, {len(ds.SHAPE_CLASSES)}]")
    kind = "circular" if args.rig == "circular" else "hemi_dodecahedron"
    rig = ds.ViewpointRig(kind=kind, count=args.views,
                          azimuth_offset=args.azimuth_offset,
                          elevation=args.elevation)
    samples = ds.generate_dataset(classes, args.per_class, rig,
                                  args.image_size, args.seed)
    ds.save_dataset(samples, args.out, classes, args.image_size, rig)
    print(f"wrote {len(samples)} samples ({args.views} views each) to {args.out}")
    return 0


def _cmd_train(args):
    from . import dataset as ds, trainer
    samples, manifest = ds.load_dataset(args.data)
    config = _load_model_config(args.config,
                                modalities=_modalities(args.modality),
                                fusion=args.fusion,
                                image_size=manifest["image_size"],
                                num_classes=len(manifest["classes"]))
    tcfg = trainer.TrainConfig(lr0=args.lr, epochs=args.epochs,
                               batch_size=args.batch_size, seed=args.seed)
    log = None if args.quiet else lambda msg: print(msg, flush=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
    report = trainer.train(samples, config, tcfg, folds=args.folds,
                           out_dir=out, log=log)
    (out / "report.json").write_text(report.to_json())
    print(report.summary_line())
    return 0


def _cmd_eval(args):
    from . import dataset as ds, trainer
    from .model import ModelConfig, MultiViewNet, load_checkpoint
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    config_path = args.config or ckpt.with_name("config.json")
    if not Path(config_path).exists():
        raise FileNotFoundError(f"model config not found: {config_path}")
    with open(config_path) as fh:
        config = ModelConfig.from_dict(json.load(fh))
    samples, _ = ds.load_dataset(args.data)
    model = load_checkpoint(ckpt, MultiViewNet(config))
    acc, ms = trainer.evaluate(model, samples)
    print(f"accuracy {acc:.2f} %  time {ms:.2f} ms/instance")
    return 0


def _cmd_gradcheck(args):
    from .checks import run_gradient_suite
    results = run_gradient_suite(seed=args.seed, full=args.full)
    ok = True
    for name, err, tol in results:
        status = "pass" if err < tol else "FAIL"
        ok = ok and err < tol
        print(f"{status}  {name}: max rel err {err:.3e} (tol {tol:g})")
    return 0 if ok else 1


def _cmd_ablate(args):
    from . import dataset as ds, trainer
    samples, manifest = ds.load_dataset(args.data)
    config = _load_model_config(args.config,
                                image_size=manifest["image_size"],
                                num_classes=len(manifest["classes"]))
    tcfg = trainer.TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                               seed=args.seed)
    log = None if args.quiet else lambda msg: print(msg, flush=True)
    table = trainer.ablation_sweep(args.axis, samples, config, tcfg,
                                   folds=args.folds, log=log)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"ablation_{args.axis}.json").write_text(json.dumps(
        {k: table[k] for k in ("axis", "columns", "rows", "reports")}, indent=1))
    (out / f"ablation_{args.axis}.txt").write_text(table["text"] + "\n")
    print(table["text"])
    return 0


def _cmd_info(args):
    from .model import param_count, layer_summary
    config = _load_model_config(args.config)
    for name, shape, size in layer_summary(config):
        print(f"{name:60s} {str(shape):20s} {size}")
    print(f"total parameters: {param_count(config)}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "ablate": _cmd_ablate,
    "info": _cmd_info,
}


def main(argv=None):
    _apply_thread_cap()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
