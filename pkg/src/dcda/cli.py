"""Command-line entry point: ``dcda <command> [options]``.

Exit status is 0 on success, 1 on a usage error and 2 when the command
itself fails (bad data, missing checkpoint, non-finite loss, ...).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import checkpoint as ckpt
from . import config as cfgmod
from .data import PhantomSpec, generate_phantoms, load_image, load_manifest, preprocess, save_image
from .data.dataset import IMAGE_SUFFIXES, TEST, TRAIN, load_eval_set
from .errors import DcdaError, LayoutError
from .metrics import EvalResult, evaluate, evaluate_masks, paired_ttest
from .types import DomainTag, ImageBatch

logger = logging.getLogger("dcda")

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(value)
    return out


def _config(args) -> cfgmod.RunConfig:
    base = cfgmod.load(args.config) if args.config else cfgmod.RunConfig()
    try:
        cfg = cfgmod.from_flat(_overrides(args.set), base)
    except (KeyError, TypeError) as exc:
        raise UsageError(str(exc)) from exc
    if getattr(args, "out_dir", None):
        cfg = cfgmod.replace(cfg, out_dir=args.out_dir)
    if cfg.data.root is None:
        raise UsageError("no dataset: set data.root in the config or pass --set data.root=DIR")
    return cfg


def _ckpt_arg(value, cfg, name):
    return Path(value) if value else cfg.out_path / name


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise LayoutError(f"{what} checkpoint {path} does not exist")
    return path


# ---------------------------------------------------------------- commands

def cmd_synth_data(args):
    spec = PhantomSpec(seed=args.seed, image_size=args.image_size, n_images=args.n_images,
                       test_count=args.test_count)
    manifest = generate_phantoms(spec, args.out)
    print(f"wrote {len(manifest.entries)} images to {args.out}")


def cmd_train_drst(args):
    from .trainer import run_stage_drst

    cfg = _config(args)
    print(run_stage_drst(cfg, resume=args.resume))


def cmd_pretrain_source(args):
    from .trainer import run_stage_source

    cfg = _config(args)
    print(run_stage_source(cfg, args.drst_ckpt, resume=args.resume))


def cmd_train_joint(args):
    from .trainer import run_stage_joint

    cfg = _config(args)
    drst = _require(_ckpt_arg(args.drst_ckpt, cfg, "drst.pt"), "style-transfer")
    fs = None if cfg.ablations.no_fs else _require(_ckpt_arg(args.fs_ckpt, cfg, "source.pt"), "source")
    print(run_stage_joint(cfg, drst, fs, resume=args.resume))


def cmd_train_oracle(args):
    from .trainer import run_oracle

    cfg = _config(args)
    print(run_oracle(cfg, epochs=args.epochs))


def cmd_run(args):
    from .trainer import load_model, run_pipeline

    cfg = _config(args)
    paths = run_pipeline(cfg)
    manifest = load_manifest(cfg.data.root, cfg.data.split_seed, cfg.data.test_count)
    result = evaluate(load_model(paths["joint"]), manifest, DomainTag.TARGET, cfg.invert_target, cfg.image_size)
    result.to_csv(cfg.out_path / "target_test.csv")
    print(result.summary())


def _image_files(folder: Path) -> dict:
    if not folder.is_dir():
        raise LayoutError(f"{folder} is not a directory")
    files = {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    if not files:
        raise LayoutError(f"no images in {folder}")
    return files


def cmd_translate(args):
    from .drst import translate_step1
    from .trainer import get_device, load_bundle

    bundle = load_bundle(args.drst_ckpt).eval()
    device = get_device()
    content, style = _image_files(Path(args.input)), _image_files(Path(args.style))
    style_ids = sorted(style)
    to_target = args.direction == "source-to-target"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def load(path, domain):
        return preprocess(load_image(path), args.image_size, domain=domain).pixels.to(device)

    src_dom, tgt_dom = DomainTag.SOURCE, DomainTag.TARGET
    with torch.no_grad():
        for k, (name, path) in enumerate(sorted(content.items())):
            partner = style[style_ids[k % len(style_ids)]]
            a = load(path, src_dom if to_target else tgt_dom)
            b = load(partner, tgt_dom if to_target else src_dom)
            x, y = (a, b) if to_target else (b, a)
            res = translate_step1(bundle, ImageBatch(x, src_dom), ImageBatch(y, tgt_dom))
            img = res.y_hat.pixels if to_target else res.x_hat.pixels
            save_image(out / f"{name}.png", img[0, 0].cpu().numpy())
    print(f"translated {len(content)} images into {out}")


def _eval_checkpoint(path, args, cfg_hint: cfgmod.RunConfig | None):
    from .trainer import load_model

    payload = ckpt.load(_require(Path(path), "model"))
    cfg = cfg_hint or cfgmod.from_flat(payload.get("config") or {})
    root = args.data_root or cfg.data.root
    if root is None:
        raise UsageError("no dataset root: pass --data-root or --config")
    size = args.image_size or cfg.image_size
    manifest = load_manifest(root, cfg.data.split_seed, cfg.data.test_count)
    domain = DomainTag(args.domain)
    invert = cfg.invert_target and domain is DomainTag.TARGET
    split = TEST if args.split == "test" else TRAIN
    data = load_eval_set(manifest, domain, size, invert, split=split)
    return evaluate(load_model(path, args.role), data, return_predictions=True)


def _eval_folder(pred_dir, gt_dir):
    preds, gts = _image_files(Path(pred_dir)), _image_files(Path(gt_dir))
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise LayoutError(f"{len(missing)} labels have no prediction, e.g. {missing[0]}")
    ids = sorted(gts)
    p = [load_image(preds[i]) > 0 for i in ids]
    g = [load_image(gts[i]) > 0 for i in ids]
    return evaluate_masks(ids, p, g), dict(zip(ids, p))


def cmd_evaluate(args):
    cfg = cfgmod.load(args.config) if args.config else None

    def score(ckpt_path, pred_dir):
        if ckpt_path:
            return _eval_checkpoint(ckpt_path, args, cfg)
        if not args.gt_dir:
            raise UsageError("--pred-dir needs --gt-dir")
        return _eval_folder(pred_dir, args.gt_dir)

    if bool(args.checkpoint) == bool(args.pred_dir):
        raise UsageError("give exactly one of --checkpoint or --pred-dir")
    result, preds = score(args.checkpoint, args.pred_dir)
    print(result.summary())
    if result.hd95_undefined:
        print(f"HD95 undefined for {result.hd95_undefined} image(s) with an empty mask")
    if args.csv:
        result.to_csv(args.csv)
    if args.save_predictions:
        out = Path(args.save_predictions)
        out.mkdir(parents=True, exist_ok=True)
        for i, m in preds.items():
            save_image(out / f"{i}.png", np.asarray(m, dtype=np.float64))
    if args.compare_checkpoint or args.compare_dir:
        other, _ = score(args.compare_checkpoint, args.compare_dir)
        print(f"compared: {other.summary()}")
        print(f"paired t-test on Dice: p={_paired_p(result, other):.4g}")


def _paired_p(a: EvalResult, b: EvalResult) -> float:
    da = {r["id"]: r["dice"] for r in a.per_image}
    db = {r["id"]: r["dice"] for r in b.per_image}
    ids = sorted(set(da) & set(db))
    if len(ids) != len(da) or len(ids) != len(db):
        raise LayoutError("prediction sets cover different images")
    return paired_ttest([da[i] for i in ids], [db[i] for i in ids])


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dcda", description="Unsupervised cross-domain vessel segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write a two-style phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-images", type=int, default=200)
    s.add_argument("--image-size", type=int, default=64)
    s.add_argument("--test-count", type=int, default=40)
    s.add_argument("--seed", type=int, default=7)
    s.set_defaults(func=cmd_synth_data)

    def training(name, func, help):
        t = sub.add_parser(name, help=help)
        t.add_argument("--config")
        t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        t.add_argument("--out-dir")
        t.set_defaults(func=func)
        return t

    t = training("train-drst", cmd_train_drst, "train the style-transfer networks")
    t.add_argument("--resume", action="store_true")
    t = training("pretrain-source", cmd_pretrain_source, "train F^S on labelled source images")
    t.add_argument("--drst-ckpt")
    t.add_argument("--resume", action="store_true")
    t = training("train-joint", cmd_train_joint, "joint training with translated images")
    t.add_argument("--drst-ckpt")
    t.add_argument("--fs-ckpt")
    t.add_argument("--resume", action="store_true")
    t = training("train-oracle", cmd_train_oracle, "target-supervised reference model")
    t.add_argument("--epochs", type=int)
    training("run", cmd_run, "all stages, then evaluate on the target test split")

    t = sub.add_parser("translate", help="render images in the other domain's style")
    t.add_argument("--drst-ckpt", required=True)
    t.add_argument("--input", required=True, help="folder of images to translate")
    t.add_argument("--style", required=True, help="folder of style references from the other domain")
    t.add_argument("--out", required=True)
    t.add_argument("--image-size", type=int, required=True)
    t.add_argument("--direction", choices=("source-to-target", "target-to-source"), default="source-to-target")
    t.set_defaults(func=cmd_translate)

    e = sub.add_parser("evaluate", help="Dice and HD95 of a model or of prediction masks")
    e.add_argument("--checkpoint")
    e.add_argument("--role", default="F^T", choices=("F^T", "F^S"))
    e.add_argument("--config")
    e.add_argument("--data-root")
    e.add_argument("--image-size", type=int)
    e.add_argument("--domain", default="target", choices=("source", "target"))
    e.add_argument("--split", default="test", choices=("test", "train"))
    e.add_argument("--pred-dir")
    e.add_argument("--gt-dir")
    e.add_argument("--compare-checkpoint")
    e.add_argument("--compare-dir")
    e.add_argument("--csv")
    e.add_argument("--save-predictions", metavar="DIR")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"dcda: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (DcdaError, OSError, ValueError, ArithmeticError, KeyError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return RUNTIME_ERROR
    return 0


if __name__ == "__main__":
    sys.exit(main())
