"""Command-line interface.

Exit codes: 0 success, 1 validation error, 2 runtime or numerical failure.
Option precedence: command-line flag > JSON config file > built-in default.
The config file is ``--config`` or ``$BIRDDET_CONFIG``; keys are global
(``seed``) or nested under the subcommand name, e.g.
``{"seed": 3, "train-retinex": {"epochs": 200}}``.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import anchors as anc
from . import dataio, gradcheck, metrics, retinex
from .autodiff import corrupt_gradient
from .rng import child_seed, make_rng

log = logging.getLogger("birddet")

CONFIG_ENV = "BIRDDET_CONFIG"

DEFAULTS = {
    "synth": {"n": None, "size": 500, "birds_min": 1, "birds_max": 6, "classes": 1,
              "format": "ppm", "low_light": True},
    "anchors": {"k": 9, "metric": "iou", "max_iters": 300, "tol": 1e-6},
    "train-retinex": {"pairs": 16, "size": 32, "epochs": 100, "enhance_epochs": None, "batch": 16,
                      "lr0": 0.0032, "lrf": 0.12, "warmup_epochs": 2.0, "warmup_bias_lr": 0.05,
                      "momentum": 0.937, "optimizer": "sgd"},
    "enhance": {},
    "eval": {"iou": 0.5, "label": "model"},
    "gradcheck": {"target": "all", "epsilon": 1e-5, "coords": None},
}


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation errors: exit 1, not argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(path):
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read config {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    return cfg


def _resolve(args, config):
    """Fill unset options from the config section, then from DEFAULTS."""
    section = config.get(args.command, {})
    for key, default in DEFAULTS[args.command].items():
        if getattr(args, key, None) is None:
            setattr(args, key, section.get(key, default))
    if args.seed is None:
        args.seed = config.get("seed", 0)


def _positive(name, value):
    if value is None or value <= 0:
        raise ValidationError(f"{name} must be positive, got {value}")


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write-test")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as e:
        raise ValidationError(f"cannot write to {path}: {e}") from None


def _parent_dir(path):
    _ensure_dir(os.path.dirname(os.path.abspath(path)))


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    if args.n is None or args.n < 1:
        raise ValidationError(f"--n must be a positive integer, got {args.n}")
    _positive("--size", args.size)
    _positive("--classes", args.classes)
    if not 0 <= args.birds_min <= args.birds_max:
        raise ValidationError("bird count range must satisfy 0 <= min <= max")
    if args.format not in ("ppm", "png"):
        raise ValidationError("--format must be ppm or png")
    if args.n < 3:
        raise ValidationError("--n must be at least 3 to form train/val/test splits")
    _ensure_dir(args.out)
    for sub in ("images", "labels") + (("low",) if args.low_light else ()):
        os.makedirs(os.path.join(args.out, sub), exist_ok=True)
    cfg = dataio.SceneConfig(height=args.size, width=args.size, birds=(args.birds_min, args.birds_max),
                             classes=args.classes)
    rng = make_rng(args.seed)
    ids = []
    width = max(6, len(str(args.n - 1)))
    for i in range(args.n):
        image_id = f"{i:0{width}d}"
        scene_rng = make_rng(child_seed(rng))
        scene = dataio.gen_synthetic_scene(scene_rng, cfg, image_id)
        dataio.save_image(scene.image, os.path.join(args.out, "images", f"{image_id}.{args.format}"))
        with open(os.path.join(args.out, "labels", f"{image_id}.txt"), "w") as fh:
            fh.write(dataio.serialize_labels(scene.boxes))
        if args.low_light:
            low = dataio.darken(scene.image, scene_rng.uniform(2.0, 3.5), scene_rng.uniform(0.4, 0.7),
                                0.02, scene_rng)
            dataio.save_image(low, os.path.join(args.out, "low", f"{image_id}.{args.format}"))
        ids.append(image_id)
    split = dataio.split_dataset(ids, dataio.DEFAULT_PROPORTIONS, args.seed)
    dataio.write_split(os.path.join(args.out, "split.txt"), split)
    print(f"wrote {args.n} scenes to {args.out} "
          f"(train {len(split.train)}, val {len(split.val)}, test {len(split.test)})")
    return 0


def _labels_dir(path):
    sub = os.path.join(path, "labels")
    return sub if os.path.isdir(sub) else path


def _read_labels(path):
    if not os.path.isdir(path):
        raise ValidationError(f"label directory {path} does not exist")
    try:
        return dataio.read_label_dir(_labels_dir(path))
    except dataio.LabelFormatError as e:
        raise ValidationError(str(e)) from None


def cmd_anchors(args):
    if args.k < 1:
        raise ValidationError("--k must be >= 1")
    _positive("--max-iters", args.max_iters)
    if args.tol < 0:
        raise ValidationError("--tol must be >= 0")
    if args.metric not in anc.METRICS:
        raise ValidationError(f"--metric must be one of {anc.METRICS}")
    labels = _read_labels(args.labels)
    boxes = [b for bs in labels.values() for b in bs]
    if not boxes:
        raise ValidationError(f"no boxes found under {args.labels}")
    _parent_dir(args.out)
    aset = anc.mine_anchors(boxes, args.k, args.metric, args.seed, args.max_iters, args.tol)
    score = anc.mean_best_iou(boxes, aset)
    anc.write_anchors(args.out, aset, {"mean_best_iou": f"{score:.17g}", "boxes": len(boxes)})
    print(f"k {aset.k}")
    print(f"inertia {aset.inertia:.6f}")
    print(f"mean_best_iou {score:.6f}")
    for w, h in aset.anchors:
        print(f"  {w:.6f} {h:.6f}")
    return 0


def _load_pairs(pairs_dir, size):
    low_dir, normal_dir = os.path.join(pairs_dir, "low"), os.path.join(pairs_dir, "images")
    if not (os.path.isdir(low_dir) and os.path.isdir(normal_dir)):
        raise ValidationError(f"{pairs_dir} must contain low/ and images/ subdirectories")
    pairs = []
    for name in sorted(os.listdir(low_dir)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in dataio.IMAGE_EXTS:
            continue
        try:
            normal_path = dataio.find_image(normal_dir, stem)
        except FileNotFoundError as e:
            raise ValidationError(str(e)) from None
        pairs.append((dataio.load_image(os.path.join(low_dir, name), (size, size)),
                      dataio.load_image(normal_path, (size, size))))
    if not pairs:
        raise ValidationError(f"no image pairs found in {pairs_dir}")
    return pairs


def cmd_train_retinex(args):
    if args.epochs < 0:
        raise ValidationError("--epochs must be >= 0")
    _positive("--size", args.size)
    _positive("--pairs", args.pairs)
    enhance_epochs = args.epochs if args.enhance_epochs is None else args.enhance_epochs
    try:
        config = retinex.TrainConfig(lr0=args.lr0, lrf=args.lrf, batch=args.batch, epochs=args.epochs,
                                     warmup_epochs=args.warmup_epochs, warmup_bias_lr=args.warmup_bias_lr,
                                     momentum=args.momentum, optimizer=args.optimizer)
        enhance_config = retinex.TrainConfig(**{**vars(config), "epochs": enhance_epochs})
        probe = retinex.EnhanceNetParams.init(0)
        retinex.check_divisible((args.size, args.size), probe)
    except ValueError as e:
        raise ValidationError(str(e)) from None
    _ensure_dir(args.out)
    if args.pairs_dir:
        pairs = _load_pairs(args.pairs_dir, args.size)
    else:
        pairs = dataio.make_pairs(args.pairs, args.size, seed=args.seed)
    rng = make_rng(args.seed)
    decom = retinex.train_decom(pairs, config, seed=child_seed(rng))
    enhance = retinex.train_enhance(pairs, decom.params, enhance_config, seed=child_seed(rng))
    coeffs = vars(retinex.LossCoefficients())
    meta = {"seed": args.seed, "coefficients": coeffs, "train": vars(config), "size": args.size}
    retinex.save_model(os.path.join(args.out, "decom.bdtc"), decom.params, **meta)
    retinex.save_model(os.path.join(args.out, "enhance.bdtc"), enhance.params,
                       **{**meta, "train": vars(enhance_config)})
    retinex.write_history(os.path.join(args.out, "decom_loss.csv"), decom.epoch_losses)
    retinex.write_history(os.path.join(args.out, "enhance_loss.csv"), enhance.epoch_losses)
    for name, res in (("decom", decom), ("enhance", enhance)):
        s = res.step_losses
        if s:
            w = min(10, len(s))
            print(f"{name}: steps {len(s)}, smoothed loss {np.mean(s[:w]):.6f} -> {np.mean(s[-w:]):.6f}")
        else:
            print(f"{name}: no training steps, initial weights written")
    return 0


def cmd_enhance(args):
    paths = {k: os.path.join(args.models, f"{k}.bdtc") for k in ("decom", "enhance")}
    for p in paths.values():
        if not os.path.isfile(p):
            raise ValidationError(f"missing model file {p}")
    try:
        image = dataio.load_image(args.input)
    except (FileNotFoundError, ValueError) as e:
        raise ValidationError(f"cannot read {args.input}: {e}") from None
    decom, _ = retinex.load_model(paths["decom"])
    enhance, _ = retinex.load_model(paths["enhance"])
    if not args.unit_illumination:
        try:
            retinex.check_divisible(image.shape, enhance)
        except ValueError as e:
            raise ValidationError(str(e)) from None
    _parent_dir(args.out)
    out = retinex.enhance_image(image, decom, enhance, unit_illumination=args.unit_illumination)
    dataio.save_image(out, args.out)
    print(f"mean brightness {image.mean():.6f} -> {out.mean():.6f}")
    return 0


def cmd_eval(args):
    if not 0 <= args.iou <= 1:
        raise ValidationError("--iou must lie in [0, 1]")
    gts = _read_labels(args.gt)
    if not os.path.isfile(args.detections):
        raise ValidationError(f"detections file {args.detections} not found")
    try:
        dets = dataio.read_detections(args.detections)
    except dataio.LabelFormatError as e:
        raise ValidationError(f"{args.detections}: {e}") from None
    unknown = sorted({d.image_id for d in dets} - set(gts))
    if unknown:
        raise ValidationError(f"detection references unknown image_id {unknown[0]!r}")
    try:
        report = metrics.evaluate(dets, gts, args.iou)
    except ValueError as e:
        raise ValidationError(str(e)) from None
    _parent_dir(args.out)
    with open(args.out, "w") as fh:
        fh.write(report.to_json() + "\n")
    print(report.summary(args.label))
    for note in report.flagged:
        print(f"note: {note}")
    return 0


def cmd_gradcheck(args):
    if not args.epsilon > 0:
        raise ValidationError(f"--epsilon must be positive, got {args.epsilon}")
    if args.target not in ("cbam", "retinex", "all"):
        raise ValidationError("--target must be cbam, retinex or all")
    if args.corrupt_op:
        with corrupt_gradient(args.corrupt_op):
            results = gradcheck.run_suite(args.target, args.epsilon, args.coords, seed=args.seed)
    else:
        results = gradcheck.run_suite(args.target, args.epsilon, args.coords, seed=args.seed)
    print(gradcheck.format_results(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="birddet", description=__doc__.split("\n")[0])
    p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
    p.add_argument("--config", default=None, help=f"JSON config file (default ${CONFIG_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    s.add_argument("--n", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int)
    s.add_argument("--birds-min", type=int)
    s.add_argument("--birds-max", type=int)
    s.add_argument("--classes", type=int)
    s.add_argument("--format", choices=("ppm", "png"))
    s.add_argument("--no-low-light", dest="low_light", action="store_const", const=False)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("anchors", help="mine anchor boxes with k-means++")
    s.add_argument("--labels", required=True, help="dataset root or labels directory")
    s.add_argument("--k", type=int)
    s.add_argument("--metric", choices=anc.METRICS)
    s.add_argument("--max-iters", type=int)
    s.add_argument("--tol", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_anchors)

    s = sub.add_parser("train-retinex", help="train Decom-Net and Enhance-Net")
    s.add_argument("--out", required=True)
    s.add_argument("--pairs-dir", default=None, help="directory with low/ and images/ (default: synthesize)")
    s.add_argument("--pairs", type=int, help="synthetic pair count")
    s.add_argument("--size", type=int, help="training resolution")
    s.add_argument("--epochs", type=int)
    s.add_argument("--enhance-epochs", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--lr0", type=float)
    s.add_argument("--lrf", type=float)
    s.add_argument("--warmup-epochs", type=float)
    s.add_argument("--warmup-bias-lr", type=float)
    s.add_argument("--momentum", type=float)
    s.add_argument("--optimizer", choices=("sgd", "adam"))
    s.set_defaults(func=cmd_train_retinex)

    s = sub.add_parser("enhance", help="enhance a low-light image")
    s.add_argument("--input", required=True)
    s.add_argument("--models", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--unit-illumination", action="store_true", help="debug: force I_hat = 1")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("eval", help="evaluate detections against ground truth")
    s.add_argument("--gt", required=True, help="dataset root or labels directory")
    s.add_argument("--detections", required=True)
    s.add_argument("--iou", type=float)
    s.add_argument("--label", default=None, help="model label for the summary table")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--target", choices=("cbam", "retinex", "all"))
    s.add_argument("--epsilon", type=float)
    s.add_argument("--coords", type=int, help="probe at most this many coordinates per net tensor")
    s.add_argument("--corrupt-op", default=None, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _resolve(args, _load_config(args.config or os.environ.get(CONFIG_ENV)))
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (retinex.TrainingDiverged, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
