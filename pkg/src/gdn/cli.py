"""Command-line entry point: generate | train | eval | infer | gradcheck | ablate.

Exit codes: 0 success, 1 usage/config error, 2 runtime or numeric failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from . import data as data_mod
from . import tensor
from .data import Dataset, SceneSpec, read_manifest
from .metrics import ConfusionMatrix, mean_iou, per_class_iou, pixel_accuracy
from .model import (SegModel, VARIANTS, load_checkpoint, predict_mask,
                    checkpoint_config_text)
from .heads import softmax_pixelwise
from .train import evaluate_model, fit
from .verify import run_suites

GRADCHECK_TOLERANCE = 1e-5


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    variant: str = "global-deconv"
    num_classes: int = 6
    canvas: int = 128
    init: str = "glorot"
    activation: str = "none"
    encoder_dilation: int = 1
    spp_levels: tuple = (1, 2, 3, 4, 5)
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch: int = 8
    lambda_label: float = 1.0
    iters: int = 300
    stage1_iters: int = 30
    stage1_lr_scale: float = 0.1
    eval_every: int = 100
    eval_subset: int = 100
    patience: int = 3
    lr_factor: float = 0.1
    seed: int = 0
    precision: str = "f64"
    workers: int = 1
    train_manifest: str = ""
    val_manifest: str = ""
    mean: str = ""

    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def validate(self) -> "RunConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.init not in ("glorot", "bilinear"):
            raise ConfigError(f"init must be glorot or bilinear, got {self.init!r}")
        if self.activation not in ("none", "relu"):
            raise ConfigError(f"activation must be none or relu, got {self.activation!r}")
        if self.batch < 1 or self.iters < 0 or self.workers < 1:
            raise ConfigError("batch/workers must be >= 1 and iters >= 0")
        if self.lambda_label < 0:
            raise ConfigError("lambda_label must be >= 0")
        return self


def parse_config(text: str) -> RunConfig:
    """Line-oriented `key = value` with '#' comments and a fixed schema."""
    known = {f.name: f for f in fields(RunConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, val, known[key].type)
    return RunConfig(**values).validate()


def _coerce(key: str, val: str, ftype) -> object:
    tname = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    try:
        if tname == "int":
            return int(val)
        if tname == "float":
            return float(val)
        if tname == "tuple":
            return tuple(int(v) for v in val.split(",") if v != "")
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {val!r} as {tname}") from None
    return val


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> RunConfig:
    try:
        with open(path) as f:
            return parse_config(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None


def code_hash() -> str:
    """Content hash over the package sources, so runs are traceable to a code version."""
    pkg_dir = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha1()
    for name in sorted(os.listdir(pkg_dir)):
        if name.endswith(".py"):
            with open(os.path.join(pkg_dir, name), "rb") as f:
                h.update(name.encode())
                h.update(f.read())
    return h.hexdigest()


def build_model(cfg: RunConfig) -> SegModel:
    return SegModel(cfg.variant, cfg.num_classes, canvas=cfg.canvas, seed=cfg.seed,
                    init=cfg.init, activation=cfg.activation,
                    encoder_dilation=cfg.encoder_dilation,
                    spp_levels=cfg.spp_levels, dtype=cfg.dtype())


def _parse_mean(cfg: RunConfig):
    if not cfg.mean:
        return None
    return tuple(float(v) for v in cfg.mean.split(","))


def load_model_from_checkpoint(ckpt_dir: str) -> tuple[SegModel, RunConfig]:
    cfg = parse_config(checkpoint_config_text(ckpt_dir))
    model = build_model(cfg)
    load_checkpoint(ckpt_dir, model)
    return model, cfg


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    spec = SceneSpec(canvas=args.canvas, num_classes=args.num_classes, seed=args.seed)
    manifests = data_mod.generate(spec, args.out, args.train, args.val, args.test)
    for split, path in manifests.items():
        print(f"{split}: {path}")
    return 0


def run_training(cfg: RunConfig, out_dir: str, quiet: bool = False) -> dict:
    if not cfg.train_manifest or not cfg.val_manifest:
        raise ConfigError("config must set train_manifest and val_manifest")
    train_man = read_manifest(cfg.train_manifest)
    val_man = read_manifest(cfg.val_manifest)
    if len(train_man.classes) - 1 != cfg.num_classes:
        raise ConfigError(f"config num_classes={cfg.num_classes} but dataset has "
                          f"{len(train_man.classes) - 1} classes")
    cfg = replace(cfg, mean=",".join(repr(float(v)) for v in train_man.mean)).validate()
    dtype = cfg.dtype()
    train_ds = Dataset(train_man, dtype=dtype)
    val_ds = Dataset(val_man, dtype=dtype)
    model = build_model(cfg)
    config_text = format_config(cfg)

    result = fit(model, train_ds, val_ds, out_dir=out_dir, lr=cfg.lr,
                 momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                 batch=cfg.batch, lambda_label=cfg.lambda_label, iters=cfg.iters,
                 stage1_iters=cfg.stage1_iters, stage1_lr_scale=cfg.stage1_lr_scale,
                 eval_every=cfg.eval_every, eval_subset=cfg.eval_subset,
                 patience=cfg.patience, lr_factor=cfg.lr_factor, seed=cfg.seed,
                 workers=cfg.workers, config_text=config_text, quiet=quiet)

    manifest = {
        "config": {f.name: list(v) if isinstance(v := getattr(cfg, f.name), tuple) else v
                   for f in fields(RunConfig)},
        "code_hash": code_hash(),
        "seed": cfg.seed,
        "start": {"first_loss": result.first_loss},
        "end": {"final_loss": result.final_loss,
                "final_val_miou": result.final_val_miou,
                "best_val_miou": result.best_val_miou,
                "lr_final": result.lr_final},
        "checkpoints": {"best": result.best_ckpt, "final": result.final_ckpt},
        "log": result.log_path,
        "dataset": {"train": cfg.train_manifest, "val": cfg.val_manifest},
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    with open(os.path.join(out_dir, "resolved.config"), "w") as f:
        f.write(config_text)
    return manifest


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg = _apply_overrides(cfg, args).validate()
    manifest = run_training(cfg, args.out, quiet=args.quiet)
    print(f"final loss {manifest['end']['final_loss']:.6f} "
          f"val mIoU {manifest['end']['final_val_miou']:.4f}")
    print(f"run manifest: {os.path.join(args.out, 'run_manifest.json')}")
    return 0


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "workers", None) is not None:
        cfg = replace(cfg, workers=args.workers)
    if getattr(args, "precision", None) is not None:
        cfg = replace(cfg, precision=args.precision)
    if getattr(args, "data", None):
        cfg = replace(cfg,
                      train_manifest=os.path.join(args.data, "train.manifest"),
                      val_manifest=os.path.join(args.data, "val.manifest"))
    return cfg


def _eval_predictions(model_pair, ds: Dataset, num_classes: int, batch: int,
                      dump_dir: str | None, oracle: bool):
    cm = ConfusionMatrix(num_classes + 1)
    for lo in range(0, len(ds), batch):
        idx = np.arange(lo, min(lo + batch, len(ds)))
        x, masks = ds.batch(idx)
        if oracle:
            pred = masks.copy()
        else:
            probs = model_pair[0].predict_probs(x)
            if model_pair[1] is not None:
                probs = 0.5 * (probs + model_pair[1].predict_probs(x))
            pred = predict_mask(probs)
        cm.accumulate(pred, masks)
        if dump_dir:
            for j, i in enumerate(idx):
                data_mod.save_mask(os.path.join(dump_dir, f"pred_{i:04d}.pgm"),
                                   pred[j].astype(np.uint8))
    return cm


def cmd_eval(args) -> int:
    man = read_manifest(args.split)
    num_classes = len(man.classes) - 1
    second = None
    if args.oracle:
        model = None
        ds = Dataset(man)
    else:
        model, cfg = load_model_from_checkpoint(args.checkpoint)
        if len(man.classes) - 1 != cfg.num_classes:
            raise ConfigError("checkpoint/config mismatch: dataset class count differs")
        ds = Dataset(man, dtype=cfg.dtype())
        if args.ensemble_with:
            second, cfg2 = load_model_from_checkpoint(args.ensemble_with)
            if cfg2.num_classes != cfg.num_classes:
                raise ConfigError("checkpoint/config mismatch: ensemble class count differs")
    dump_dir = None
    if args.dump_masks:
        dump_dir = os.path.join(args.out, "pred_masks")
        os.makedirs(dump_dir, exist_ok=True)
    os.makedirs(args.out, exist_ok=True)
    cm = _eval_predictions((model, second), ds, num_classes, args.batch, dump_dir, args.oracle)

    iou = per_class_iou(cm)
    miou = mean_iou(cm)
    csv_path = os.path.join(args.out, "iou.csv")
    with open(csv_path, "w") as f:
        for c in range(num_classes + 1):
            f.write(f"{man.classes[c]},{float(iou[c])!r}\n")
        f.write(f"mean,{float(miou)!r}\n")
    print(f"mIoU {miou:.4f}  pixel accuracy {pixel_accuracy(cm):.4f}")
    print(f"per-class IoU: {csv_path}")
    return 0


def cmd_infer(args) -> int:
    model, cfg = load_model_from_checkpoint(args.checkpoint)
    mean = _parse_mean(cfg)
    img = data_mod.load_image(args.image, mean=mean, dtype=cfg.dtype())
    h, w = img.shape[1], img.shape[2]
    if h > cfg.canvas or w > cfg.canvas:
        raise tensor.ShapeError(
            f"input {h}x{w} exceeds the trained maximum H_max=W_max={cfg.canvas}")
    x = img[None]
    probs = model.predict_probs(x, force_subset=args.force_subset)
    if args.ensemble_with:
        second, _ = load_model_from_checkpoint(args.ensemble_with)
        probs = 0.5 * (probs + second.predict_probs(x, force_subset=args.force_subset))
    pred = predict_mask(probs)[0].astype(np.uint8)

    os.makedirs(args.out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.image))[0]
    mask_path = args.mask_out or os.path.join(args.out, f"{stem}_mask.pgm")
    data_mod.save_mask(mask_path, pred)
    print(f"mask: {mask_path} ({pred.shape[0]}x{pred.shape[1]})")

    if args.dump_probs:
        probs_path = os.path.join(args.out, f"{stem}_probs.gdt1")
        tensor.save_gdt1(probs_path, probs.astype(np.float64))
        print(f"probs: {probs_path}")

    if args.sheet:
        tiles = [data_mod.load_ppm(args.image)]
        if args.gt:
            tiles.append(data_mod.PALETTE[np.minimum(data_mod.load_mask(args.gt),
                                                     len(data_mod.PALETTE) - 1)])
        if args.baseline_checkpoint:
            base_model, _ = load_model_from_checkpoint(args.baseline_checkpoint)
            base_pred = predict_mask(base_model.predict_probs(x))[0]
            tiles.append(data_mod.PALETTE[base_pred])
        tiles.append(data_mod.PALETTE[pred])
        sheet = np.concatenate(tiles, axis=1)
        data_mod.save_ppm(args.sheet, sheet)
        print(f"contact sheet: {args.sheet} ({sheet.shape[0]}x{sheet.shape[1]})")
    return 0


def cmd_gradcheck(args) -> int:
    if args.precision == "f32":
        print("gradcheck requires f64 precision; refusing to run in f32", file=sys.stderr)
        return 1
    results = run_suites(seed=args.seed, eps=args.eps, instances=args.instances,
                         inject_fault=args.inject_fault)
    failed = False
    for name, err in results:
        ok = err <= args.tolerance
        failed = failed or not ok
        print(f"{name:34s} max rel err {err:.3e}  {'PASS' if ok else 'FAIL'}")
    if failed:
        print(f"gradcheck FAILED (tolerance {args.tolerance:g})", file=sys.stderr)
        return 3
    print(f"all suites within {args.tolerance:g}")
    return 0


ABLATE_DEFAULT_VARIANTS = ("bilinear-fixed", "global-deconv", "global-deconv+label-loss")


def cmd_ablate(args) -> int:
    base = load_config(args.config) if args.config else RunConfig(init="bilinear")
    base = _apply_overrides(base, args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}")
    if not variants or not seeds:
        raise ConfigError("need at least one variant and one seed")

    rows = []
    for variant in sorted(variants, key=VARIANTS.index):
        mious = []
        for seed in seeds:
            cfg = replace(base, variant=variant, seed=seed).validate()
            run_dir = os.path.join(args.out, variant.replace("+", "_"), f"seed{seed}")
            print(f"[ablate] {variant} seed {seed}")
            manifest = run_training(cfg, run_dir, quiet=args.quiet)
            mious.append(manifest["end"]["final_val_miou"])
            print(f"[ablate]   val mIoU {mious[-1]:.4f}")
        rows.append((variant, mious))

    summary = os.path.join(args.out, "summary.csv")
    with open(summary, "w") as f:
        f.write("variant,mean_miou,std_miou,n_seeds," +
                ",".join(f"seed{s}" for s in seeds) + "\n")
        for variant, mious in rows:
            f.write(f"{variant},{float(np.mean(mious))!r},{float(np.std(mious))!r},"
                    f"{len(mious)}," + ",".join(repr(float(m)) for m in mious) + "\n")
    print(f"summary: {summary}")
    for variant, mious in rows:
        print(f"  {variant:34s} mean {np.mean(mious):.4f} +- {np.std(mious):.4f}")
    return 0


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gdn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--canvas", type=int, default=128)
    g.add_argument("--num-classes", type=int, default=6)
    g.add_argument("--train", type=int, default=800)
    g.add_argument("--val", type=int, default=200)
    g.add_argument("--test", type=int, default=50)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--workers", type=int, default=None)
    t.add_argument("--precision", choices=("f32", "f64"), default=None)
    t.add_argument("--data", default=None, help="dataset dir with train/val manifests")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--split", required=True, help="manifest path")
    e.add_argument("--out", required=True)
    e.add_argument("--batch", type=int, default=8)
    e.add_argument("--ensemble-with", default=None)
    e.add_argument("--dump-masks", action="store_true")
    e.add_argument("--oracle", action="store_true",
                   help="score the ground truth against itself")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="predict a mask for one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--mask-out", default=None)
    i.add_argument("--dump-probs", action="store_true")
    i.add_argument("--force-subset", action="store_true")
    i.add_argument("--ensemble-with", default=None)
    i.add_argument("--sheet", default=None, help="write an image|gt|baseline|pred PPM")
    i.add_argument("--gt", default=None)
    i.add_argument("--baseline-checkpoint", default=None)
    i.set_defaults(fn=cmd_infer)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every layer")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--eps", type=float, default=1e-6)
    c.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    c.add_argument("--instances", type=int, default=20)
    c.add_argument("--precision", choices=("f32", "f64"), default="f64")
    c.add_argument("--inject-fault", action="store_true",
                   help="corrupt one analytic gradient to prove the harness catches it")
    c.set_defaults(fn=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train a grid of variants x seeds and summarize")
    a.add_argument("--data", required=True, help="dataset dir with train/val manifests")
    a.add_argument("--out", required=True)
    a.add_argument("--variants", default=",".join(ABLATE_DEFAULT_VARIANTS))
    a.add_argument("--seeds", default="0,1,2")
    a.add_argument("--config", default=None, help="base config for every run")
    a.add_argument("--workers", type=int, default=None)
    a.add_argument("--precision", choices=("f32", "f64"), default=None)
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (tensor.ShapeError, tensor.FormatError, FloatingPointError,
            ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
