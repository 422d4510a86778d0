"""Three-stage schedule: style transfer, source pretraining, joint training.

Every stage writes one checkpoint (rewritten after each epoch) and appends
one record per epoch to ``metrics.log`` in the run's output directory.
Epoch 0 is a pass over the data before any update.  Batches for epoch ``e``
are drawn from an rng seeded with ``(seed, stage, e)``, so a resumed run
sees exactly the batches an uninterrupted one would.
"""
from __future__ import annotations

import functools
import logging
import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from .ccl import Role, SegModel, joint_loss, needed_outputs, seg_loss, teacher_only_outputs, wire_batch
from .ccl.model import CclBatchWiring, probs_to_mask
from .config import RunConfig, flatten
from .data import UnpairedSampler, load_eval_set, load_manifest, load_train_set
from .data.dataset import TRAIN, DomainData
from .drst import DrstArch, DrstBundle, drst_eval_losses, drst_train_step, make_optimizers, translate_step1
from .errors import LabelError, NonFiniteError
from .metrics import dice_score
from .types import LOSS_KEYS, DomainTag, ImageBatch, Mask, Stage, TrainPhase

logger = logging.getLogger(__name__)

STAGE_FILES = {Stage.DRST_PRETRAIN: "drst.pt", Stage.SOURCE_PRETRAIN: "source.pt", Stage.JOINT: "joint.pt"}


def derive_seed(seed: int, *parts) -> int:
    words = [seed] + [zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


def get_device() -> torch.device:
    return torch.device(os.environ.get("DCDA_DEVICE", "cpu"))


def setup_determinism(config: RunConfig) -> None:
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


class MetricsLog:
    """Plain-text log, one ``key=value`` record per line."""

    def __init__(self, path):
        self.path = Path(path)

    def append(self, record: dict) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        parts = []
        for k, v in record.items():
            parts.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
        with open(self.path, "a") as fh:
            fh.write(" ".join(parts) + "\n")

    @staticmethod
    def parse_line(line: str) -> dict:
        rec = {}
        for token in line.split():
            k, v = token.split("=", 1)
            if k == "stage":
                rec[k] = v
            elif k == "epoch":
                rec[k] = int(v)
            else:
                rec[k] = float(v)
        return rec

    def read(self, stage: str | None = None) -> list:
        if not self.path.exists():
            return []
        recs = [self.parse_line(l) for l in self.path.read_text().splitlines() if l.strip()]
        return [r for r in recs if stage is None or r["stage"] == stage]


@dataclass
class RunData:
    source_train: DomainData
    target_train: DomainData
    target_test: DomainData


@functools.lru_cache(maxsize=4)
def _cached_data(root, split_seed, test_count, size, invert):
    manifest = load_manifest(root, split_seed, test_count)
    return RunData(
        load_train_set(manifest, DomainTag.SOURCE, size),
        load_train_set(manifest, DomainTag.TARGET, size, invert),
        load_eval_set(manifest, DomainTag.TARGET, size, invert),
    )


def load_run_data(config: RunConfig) -> RunData:
    if not config.data.root:
        raise LabelError("config data.root is not set")
    return _cached_data(str(Path(config.data.root).resolve()), config.data.split_seed, config.data.test_count,
                        config.image_size, config.invert_target)


def build_bundle(config: RunConfig, arch: DrstArch | None = None) -> DrstBundle:
    torch.manual_seed(derive_seed(config.seed, "drst"))
    return DrstBundle(arch or config.drst).to(get_device())


def build_seg(config: RunConfig, role: Role, tag: str | None = None) -> SegModel:
    torch.manual_seed(derive_seed(config.seed, tag or role.value))
    return SegModel(role, config.seg.encoder_depth, config.seg.base_channels).to(get_device())


def seg_optimizer(config: RunConfig, model: SegModel) -> torch.optim.Optimizer:
    o = config.seg_optimizer
    if o.schedule != "none":
        raise ValueError(f"unsupported segmentation lr schedule {o.schedule!r}")
    return torch.optim.Adam(model.parameters(), lr=o.lr, betas=(o.beta1, o.beta2), weight_decay=o.weight_decay)


def _sampler(config: RunConfig, data: RunData, stage: Stage) -> UnpairedSampler:
    return UnpairedSampler(data.source_train, data.target_train, config.batch_size, _epoch_rng(config, stage, 0))


def _epoch_rng(config: RunConfig, stage: Stage, epoch: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, stage.value, epoch])


def _start_epoch(config, stage, epoch, sampler):
    sampler.reset(_epoch_rng(config, stage, epoch))
    torch.manual_seed(derive_seed(config.seed, stage.name, epoch))


def _on_device(batch: ImageBatch) -> ImageBatch:
    dev = get_device()
    return batch if batch.pixels.device == dev else batch.with_pixels(batch.pixels.to(dev))


def _mask_on_device(mask: Mask) -> Mask:
    return Mask(mask.labels.to(get_device()))


def _mean_records(records: list) -> dict:
    if not records:
        return {}
    keys = [k for k in records[0] if all(k in r for r in records)]
    return {k: float(np.mean([r[k] for r in records])) for k in keys}


def _batch_dice(probs, gt: Mask) -> float:
    pred = probs_to_mask(probs).labels.cpu().numpy()
    lab = gt.labels.cpu().numpy()
    return float(np.mean([dice_score(p, g) for p, g in zip(pred, lab)]))


class _FrozenBuffers:
    """Restore normalization running statistics on exit (for side-effect-free passes)."""

    def __init__(self, *models):
        self.models = [m for m in models if m is not None]

    def __enter__(self):
        self.saved = [{k: v.clone() for k, v in m.named_buffers()} for m in self.models]

    def __exit__(self, *exc):
        with torch.no_grad():
            for m, saved in zip(self.models, self.saved):
                for k, v in m.named_buffers():
                    v.copy_(saved[k])


def _log(config: RunConfig, stage: Stage, epoch: int, values: dict) -> dict:
    record = {"stage": stage.name, "epoch": epoch}
    record.update({k: values[k] for k in LOSS_KEYS if k in values})
    record.update({k: v for k, v in values.items() if k not in LOSS_KEYS})
    MetricsLog(config.out_path / "metrics.log").append(record)
    logger.info("%s epoch %d %s", stage.name, epoch,
                " ".join(f"{k}={v:.4f}" for k, v in values.items()))
    return record


# ---------------------------------------------------------------- stage 1

def load_bundle(path) -> DrstBundle:
    payload = ckpt.load(path)
    bundle = DrstBundle(DrstArch(**payload["manifest"]["arch"]))
    bundle.load_symbol_state_dict(payload["params"])
    return bundle.to(get_device())


def run_stage_drst(config: RunConfig, resume: bool = False, data: RunData | None = None) -> Path:
    """Train the style-transfer networks alone for ``epochs.drst`` epochs."""
    setup_determinism(config)
    data = data or load_run_data(config)
    stage = Stage.DRST_PRETRAIN
    path = config.out_path / STAGE_FILES[stage]
    bundle = build_bundle(config)
    o = config.optimizer
    opts = make_optimizers(bundle, o.lr, o.weight_decay, (o.beta1, o.beta2))
    start = 1
    if resume and path.exists():
        payload = ckpt.load(path)
        bundle.load_symbol_state_dict(payload["params"])
        opts.load_state_dict(payload["optimizers"]["drst"])
        start = payload["epoch"] + 1
    sampler = _sampler(config, data, stage)

    def save(epoch):
        ckpt.save(path, bundle.symbol_state_dict(), {"drst": opts.state_dict()}, ckpt.drst_manifest(bundle),
                  epoch=epoch, config=flatten(config))

    if start == 1:
        _start_epoch(config, stage, 0, sampler)
        recs = [drst_eval_losses(bundle, _on_device(x), _on_device(y), config.weights) for (x, _), y in sampler]
        _log(config, stage, 0, _mean_records(recs))
        save(0)
    for epoch in range(start, config.epochs.drst + 1):
        _start_epoch(config, stage, epoch, sampler)
        phase = TrainPhase(stage, epoch, config.tau)
        try:
            recs = [drst_train_step(bundle, _on_device(x), _on_device(y), opts, config.weights, phase).values
                    for (x, _), y in sampler]
        except NonFiniteError:
            logger.error("non-finite loss in epoch %d; keeping checkpoint from epoch %d", epoch, epoch - 1)
            raise
        _log(config, stage, epoch, _mean_records(recs))
        save(epoch)
    return path


# ---------------------------------------------------------------- stage 2

def load_seg_models(path, config: RunConfig):
    payload = ckpt.load(path)
    models = {}
    for role in Role:
        if any(k.startswith(role.value + ".") for k in payload["params"]):
            m = build_seg(config, role)
            ckpt.load_seg_state(m, payload["params"], role.value)
            models[role] = m
    return models, payload


def run_stage_source(config: RunConfig, drst_ckpt=None, resume: bool = False, data: RunData | None = None) -> Path:
    """Train F^S on labelled source images with the Dice loss; F^T is created and left untouched."""
    setup_determinism(config)
    data = data or load_run_data(config)
    if data.source_train.labels is None:
        raise LabelError("source training labels are missing")
    stage = Stage.SOURCE_PRETRAIN
    path = config.out_path / STAGE_FILES[stage]
    f_s = build_seg(config, Role.SOURCE_EXPERT)
    f_t = build_seg(config, Role.TARGET_EXPERT)
    opt = seg_optimizer(config, f_s)
    start = 1
    if resume and path.exists():
        models, payload = load_seg_models(path, config)
        f_s, f_t = models[Role.SOURCE_EXPERT], models[Role.TARGET_EXPERT]
        opt = seg_optimizer(config, f_s)
        opt.load_state_dict(payload["optimizers"]["F^S"])
        start = payload["epoch"] + 1
    f_s.train()
    sampler = _sampler(config, data, stage)

    def save(epoch):
        params = {**ckpt.seg_state("F^S", f_s), **ckpt.seg_state("F^T", f_t)}
        ckpt.save(path, params, {"F^S": opt.state_dict()}, {"seg": flatten(config.seg), "drst_checkpoint": str(drst_ckpt)},
                  epoch=epoch, config=flatten(config))

    def step(x, gt, phase, update):
        probs = f_s(x)
        loss, report = joint_loss(CclBatchWiring(gt_x=gt, f_s_x=probs), phase)
        if update:
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        return {**report.values, "dice": _batch_dice(probs, gt)}

    if start == 1:
        _start_epoch(config, stage, 0, sampler)
        with torch.no_grad(), _FrozenBuffers(f_s):
            recs = [step(_on_device(x), _mask_on_device(gt), TrainPhase(stage, 0, config.tau), False)
                    for (x, gt), _ in sampler]
        _log(config, stage, 0, _mean_records(recs))
        save(0)
    for epoch in range(start, config.epochs.source + 1):
        _start_epoch(config, stage, epoch, sampler)
        phase = TrainPhase(stage, epoch, config.tau)
        recs = [step(_on_device(x), _mask_on_device(gt), phase, True) for (x, gt), _ in sampler]
        _log(config, stage, epoch, _mean_records(recs))
        save(epoch)
    return path


# ---------------------------------------------------------------- stage 3

class TranslationCache:
    """Translations of every training image with a fixed style partner.

    Only valid while the style-transfer networks are frozen.  y_hat for the
    i-th source image borrows the style of target image ``i mod n_t`` and
    vice versa.
    """

    def __init__(self, bundle: DrstBundle, data: RunData, batch_size: int = 16):
        src, tgt = data.source_train, data.target_train
        n = max(len(src), len(tgt))
        self.x_hat, self.y_hat = {}, {}
        with torch.no_grad():
            for lo in range(0, n, batch_size):
                idx = range(lo, min(lo + batch_size, n))
                x = _on_device(src.batch([i % len(src) for i in idx]))
                y = _on_device(tgt.batch([i % len(tgt) for i in idx]))
                res = translate_step1(bundle, x, y)
                for k, i in enumerate(idx):
                    if i < len(src):
                        self.y_hat[src.ids[i]] = res.y_hat.pixels[k]
                    if i < len(tgt):
                        self.x_hat[tgt.ids[i]] = res.x_hat.pixels[k]

    def lookup(self, x: ImageBatch, y: ImageBatch):
        x_hat = ImageBatch(torch.stack([self.x_hat[i] for i in y.ids]), DomainTag.SOURCE, y.ids)
        y_hat = ImageBatch(torch.stack([self.y_hat[i] for i in x.ids]), DomainTag.TARGET, x.ids)
        return x_hat, y_hat


def run_stage_joint(config: RunConfig, drst_ckpt, fs_ckpt=None, resume: bool = False,
                    data: RunData | None = None) -> Path:
    """Joint training of F^S and F^T on original and translated images.

    With ``ablations.no_fs`` the source stage is not used: F^T starts from
    scratch and only learns from the translated, labelled source images.
    """
    setup_determinism(config)
    data = data or load_run_data(config)
    stage = Stage.JOINT
    abl = config.ablations
    path = config.out_path / STAGE_FILES[stage]
    bundle = load_bundle(drst_ckpt)
    drst_opts = None
    if config.cotrain_drst:
        o = config.optimizer
        drst_opts = make_optimizers(bundle, o.lr, o.weight_decay, (o.beta1, o.beta2))
        drst_opts.load_state_dict(ckpt.load(drst_ckpt)["optimizers"]["drst"])
    else:
        bundle.requires_grad_(False)
    if abl.no_fs:
        f_s, f_t = None, build_seg(config, Role.TARGET_EXPERT)
    else:
        if fs_ckpt is None:
            raise LabelError("joint training needs a source-pretrained checkpoint unless ablations.no_fs is set")
        models, payload = load_seg_models(fs_ckpt, config)
        f_s, f_t = models[Role.SOURCE_EXPERT], models[Role.TARGET_EXPERT]
    opt_s = seg_optimizer(config, f_s) if f_s is not None else None
    opt_t = seg_optimizer(config, f_t)
    if opt_s is not None and fs_ckpt is not None and not resume:
        opt_s.load_state_dict(ckpt.load(fs_ckpt)["optimizers"]["F^S"])
    start = 1
    if resume and path.exists():
        payload = ckpt.load(path)
        if f_s is not None:
            ckpt.load_seg_state(f_s, payload["params"], "F^S")
            opt_s.load_state_dict(payload["optimizers"]["F^S"])
        ckpt.load_seg_state(f_t, payload["params"], "F^T")
        opt_t.load_state_dict(payload["optimizers"]["F^T"])
        if config.cotrain_drst:
            bundle.load_symbol_state_dict({k[5:]: v for k, v in payload["params"].items() if k.startswith("DRST.")})
            drst_opts.load_state_dict(payload["optimizers"]["drst"])
        start = payload["epoch"] + 1
    cache = TranslationCache(bundle, data) if config.cache_translations and not config.cotrain_drst else None
    sampler = _sampler(config, data, stage)
    models = [m for m in (f_s, f_t) if m is not None]
    for m in models:
        m.train()

    def save(epoch):
        params = ckpt.seg_state("F^T", f_t)
        optims = {"F^T": opt_t.state_dict()}
        if f_s is not None:
            params.update(ckpt.seg_state("F^S", f_s))
            optims["F^S"] = opt_s.state_dict()
        if config.cotrain_drst:
            params.update({f"DRST.{k}": v for k, v in bundle.symbol_state_dict().items()})
            optims["drst"] = drst_opts.state_dict()
        manifest = {"seg": flatten(config.seg), "drst_checkpoint": str(drst_ckpt), "fs_checkpoint": str(fs_ckpt)}
        ckpt.save(path, params, optims, manifest, epoch=epoch, config=flatten(config))

    def step(x, gt, y, phase, update):
        extra = {}
        if update and drst_opts is not None:
            r = drst_train_step(bundle, x, y, drst_opts, config.weights, phase)
            extra = {k: r.values[k] for k in ("adv_x", "adv_y", "content_adv", "cyc")}
        needs = needed_outputs(phase, abl)
        if not needs:
            return {"joint": 0.0, **extra}
        x_hat = y_hat = None
        if needs & {"f_s_xhat", "f_t_yhat"}:
            if cache is not None:
                x_hat, y_hat = cache.lookup(x, y)
            else:
                with torch.no_grad():
                    res = translate_step1(bundle, x, y)
                x_hat, y_hat = res.x_hat, res.y_hat
        wiring = wire_batch(f_s, f_t, x, y, x_hat, y_hat, gt, outputs=needs,
                            no_grad=teacher_only_outputs(phase, abl))
        loss, report = joint_loss(wiring, phase, abl)
        if update and loss is not None and loss.requires_grad:
            for opt in (opt_s, opt_t):
                if opt is not None:
                    opt.zero_grad(set_to_none=True)
            loss.backward()
            for m, opt in ((f_s, opt_s), (f_t, opt_t)):
                if m is not None and any(p.grad is not None for p in m.parameters()):
                    opt.step()
        values = {**report.values, **extra}
        if wiring.f_t_yhat is not None:
            values["dice"] = _batch_dice(wiring.f_t_yhat.probs, gt)
        return values

    if start == 1:
        _start_epoch(config, stage, 0, sampler)
        with torch.no_grad(), _FrozenBuffers(*models):
            recs = [step(_on_device(x), _mask_on_device(gt), _on_device(y), TrainPhase(stage, 0, config.tau), False)
                    for (x, gt), y in sampler]
        _log(config, stage, 0, _mean_records(recs))
        save(0)
    for epoch in range(start, config.epochs.joint + 1):
        _start_epoch(config, stage, epoch, sampler)
        phase = TrainPhase(stage, epoch, config.tau)
        recs = [step(_on_device(x), _mask_on_device(gt), _on_device(y), phase, True) for (x, gt), y in sampler]
        _log(config, stage, epoch, _mean_records(recs))
        save(epoch)
    return path


# ---------------------------------------------------------------- baselines and driver

def run_oracle(config: RunConfig, epochs: int | None = None, data: RunData | None = None) -> Path:
    """Target-supervised reference model trained on the target TRAIN split with its labels."""
    setup_determinism(config)
    if data is None:
        data = load_run_data(config)
    manifest = load_manifest(config.data.root, config.data.split_seed, config.data.test_count)
    target = load_eval_set(manifest, DomainTag.TARGET, config.image_size, config.invert_target, split=TRAIN)
    epochs = config.epochs.source + config.epochs.joint if epochs is None else epochs
    model = build_seg(config, Role.TARGET_EXPERT, tag="oracle")
    opt = seg_optimizer(config, model)
    model.train()
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([config.seed, 99, epoch])
        order = rng.permutation(len(target))
        losses = []
        for lo in range(0, len(order) - config.batch_size + 1, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            loss = seg_loss(model(_on_device(target.batch(idx))), _mask_on_device(target.mask(idx)))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        logger.info("ORACLE epoch %d seg=%.4f", epoch, float(np.mean(losses)))
    path = config.out_path / "oracle.pt"
    ckpt.save(path, ckpt.seg_state("F^T", model), {}, {"seg": flatten(config.seg)}, epoch=epochs,
              config=flatten(config))
    return path


def run_pipeline(config: RunConfig, data: RunData | None = None) -> dict:
    """All three stages in order; returns the checkpoint paths."""
    data = data or load_run_data(config)
    paths = {"drst": run_stage_drst(config, data=data)}
    if not config.ablations.no_fs:
        paths["source"] = run_stage_source(config, paths["drst"], data=data)
    paths["joint"] = run_stage_joint(config, paths["drst"], paths.get("source"), data=data)
    return paths


def load_model(path, role: str = "F^T", config: RunConfig | None = None) -> SegModel:
    """Load one segmentation model from any stage checkpoint."""
    payload = ckpt.load(path)
    seg = payload["manifest"].get("seg") or {}
    model = SegModel(Role(role), seg.get("encoder_depth", 4), seg.get("base_channels", 16))
    ckpt.load_seg_state(model, payload["params"], role)
    return model.to(get_device())
