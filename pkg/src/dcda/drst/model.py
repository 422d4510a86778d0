"""Style-transfer bundle, two-step translation and the alternating train step."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Optional

import torch
import torch.nn as nn

from ..errors import NonFiniteError, ShapeError, StateError
from ..types import ContentMap, DomainTag, ImageBatch, LossReport, Stage, StyleCode, TrainPhase
from .losses import adv_loss, content_adv_loss, cycle_loss, generator_adv_loss
from .networks import ContentDiscriminator, ContentEncoder, Generator, PatchDiscriminator, ResBlock, StyleEncoder

# attribute name -> symbol used in checkpoint keys
SYMBOLS = {
    "content_encoder_x": "E_C^X",
    "content_encoder_y": "E_C^Y",
    "style_encoder_x": "E_S^X",
    "style_encoder_y": "E_S^Y",
    "generator_x": "G_X",
    "generator_y": "G_Y",
    "discriminator_x": "D_X",
    "discriminator_y": "D_Y",
    "content_discriminator": "D_C",
}
DISCRIMINATORS = ("discriminator_x", "discriminator_y", "content_discriminator")
TRANSLATORS = tuple(k for k in SYMBOLS if k not in DISCRIMINATORS)


@dataclass
class DrstArch:
    enc_base: int = 16
    content_ch: int = 64
    style_dim: int = 8
    n_down: int = 3
    n_res: int = 2
    disc_base: int = 64
    disc_layers: int = 3
    disc_spectral_norm: bool = False
    content_disc_base: int = 64


@dataclass
class LossWeights:
    adv: float = 1.0
    cyc: float = 10.0
    content: float = 1.0


class DrstBundle(nn.Module):
    """The nine named networks; both content encoders hold the same last layer."""

    def __init__(self, arch: DrstArch | None = None, **overrides):
        super().__init__()
        if arch is None and not overrides:
            arch = DrstArch()
        elif arch is None:
            arch = DrstArch(**overrides)
        self.arch = arch
        shared = ResBlock(arch.content_ch)
        self.content_encoder_x = ContentEncoder(shared, 1, arch.enc_base, arch.content_ch, arch.n_down)
        self.content_encoder_y = ContentEncoder(shared, 1, arch.enc_base, arch.content_ch, arch.n_down)
        self.style_encoder_x = StyleEncoder(1, arch.enc_base, arch.style_dim, arch.n_down)
        self.style_encoder_y = StyleEncoder(1, arch.enc_base, arch.style_dim, arch.n_down)
        self.generator_x = Generator(arch.content_ch, arch.style_dim, 1, arch.n_res, arch.n_down)
        self.generator_y = Generator(arch.content_ch, arch.style_dim, 1, arch.n_res, arch.n_down)
        self.discriminator_x = PatchDiscriminator(1, arch.disc_base, arch.disc_layers, arch.disc_spectral_norm)
        self.discriminator_y = PatchDiscriminator(1, arch.disc_base, arch.disc_layers, arch.disc_spectral_norm)
        self.content_discriminator = ContentDiscriminator(arch.content_ch, arch.content_disc_base)

    @classmethod
    def from_parts(cls, **parts) -> "DrstBundle":
        """Assemble a bundle from arbitrary callables (used for stubs in tests)."""
        obj = nn.Module.__new__(cls)
        nn.Module.__init__(obj)
        obj.arch = parts.pop("arch", None)
        for name in SYMBOLS:
            if name in parts:
                setattr(obj, name, parts[name])
        return obj

    @property
    def shared_layer_handle(self) -> nn.Module:
        return self.content_encoder_x.shared

    @property
    def shared_layer_key(self) -> str:
        return "E_C^X.shared"

    def translator_parameters(self):
        seen = {}
        for name in TRANSLATORS:
            for p in getattr(self, name).parameters():
                seen.setdefault(id(p), p)
        return list(seen.values())

    def discriminator_parameters(self):
        return [p for name in DISCRIMINATORS for p in getattr(self, name).parameters()]

    def symbol_state_dict(self) -> dict:
        """Parameters keyed by network symbol, e.g. ``E_C^X.blocks.3.0.weight``.

        The shared layer is stored once, under ``shared_layer_key``.
        """
        out = {}
        for name, sym in SYMBOLS.items():
            for k, v in getattr(self, name).state_dict().items():
                if name == "content_encoder_y" and k.startswith("shared."):
                    continue
                out[f"{sym}.{k}"] = v
        return out

    def load_symbol_state_dict(self, state: dict) -> None:
        for name, sym in SYMBOLS.items():
            prefix = sym + "."
            sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            if name == "content_encoder_y":
                shared = self.shared_layer_key + "."
                sub.update({"shared." + k[len(shared):]: v for k, v in state.items() if k.startswith(shared)})
            getattr(self, name).load_state_dict(sub)


@dataclass
class TranslationResult:
    x: ImageBatch
    y: ImageBatch
    x_hat: Optional[ImageBatch] = None
    y_hat: Optional[ImageBatch] = None
    x_rec: Optional[ImageBatch] = None
    y_rec: Optional[ImageBatch] = None
    latents: dict = field(default_factory=dict)


def _check_pair(x: ImageBatch, y: ImageBatch):
    if x.domain is not DomainTag.SOURCE or y.domain is not DomainTag.TARGET:
        raise ShapeError("expected x from SOURCE and y from TARGET")
    if x.pixels.shape != y.pixels.shape:
        raise ShapeError(f"batch shapes differ: {tuple(x.pixels.shape)} vs {tuple(y.pixels.shape)}")


def translate_step1(bundle: DrstBundle, x: ImageBatch, y: ImageBatch) -> TranslationResult:
    """Swap styles once: x_hat = G_X(S_X, C_Y), y_hat = G_Y(S_Y, C_X)."""
    _check_pair(x, y)
    c_x = bundle.content_encoder_x(x.pixels)
    c_y = bundle.content_encoder_y(y.pixels)
    s_x = bundle.style_encoder_x(x.pixels)
    s_y = bundle.style_encoder_y(y.pixels)
    x_hat = bundle.generator_x(c_y, s_x)
    y_hat = bundle.generator_y(c_x, s_y)
    return TranslationResult(
        x=x, y=y,
        x_hat=ImageBatch(x_hat, DomainTag.SOURCE, y.ids),
        y_hat=ImageBatch(y_hat, DomainTag.TARGET, x.ids),
        latents={
            "c_x": ContentMap(c_x, DomainTag.SOURCE),
            "c_y": ContentMap(c_y, DomainTag.TARGET),
            "s_x": StyleCode(s_x, DomainTag.SOURCE),
            "s_y": StyleCode(s_y, DomainTag.TARGET),
        },
    )


def translate_step2(bundle: DrstBundle, partial: TranslationResult) -> TranslationResult:
    """Swap back: x_rec = G_X(E_S^X(x_hat), E_C^Y(y_hat)), y_rec = G_Y(E_S^Y(y_hat), E_C^X(x_hat))."""
    if partial.x_hat is None or partial.y_hat is None:
        raise StateError("translate_step1 has not been run")
    xh, yh = partial.x_hat.pixels, partial.y_hat.pixels
    x_rec = bundle.generator_x(bundle.content_encoder_y(yh), bundle.style_encoder_x(xh))
    y_rec = bundle.generator_y(bundle.content_encoder_x(xh), bundle.style_encoder_y(yh))
    return replace(
        partial,
        x_rec=ImageBatch(x_rec, DomainTag.SOURCE, partial.x.ids),
        y_rec=ImageBatch(y_rec, DomainTag.TARGET, partial.y.ids),
    )


def translate(bundle: DrstBundle, x: ImageBatch, y: ImageBatch) -> TranslationResult:
    return translate_step2(bundle, translate_step1(bundle, x, y))


@dataclass
class DrstOptimizers:
    discriminators: torch.optim.Optimizer
    translators: torch.optim.Optimizer

    def state_dict(self):
        return {"discriminators": self.discriminators.state_dict(), "translators": self.translators.state_dict()}

    def load_state_dict(self, state):
        self.discriminators.load_state_dict(state["discriminators"])
        self.translators.load_state_dict(state["translators"])


def make_optimizers(bundle: DrstBundle, lr=1e-4, weight_decay=1e-4, betas=(0.5, 0.999)) -> DrstOptimizers:
    return DrstOptimizers(
        torch.optim.Adam(bundle.discriminator_parameters(), lr=lr, betas=betas, weight_decay=weight_decay),
        torch.optim.Adam(bundle.translator_parameters(), lr=lr, betas=betas, weight_decay=weight_decay),
    )


def _finite(*losses):
    return all(torch.isfinite(l.detach()).all() for l in losses)


def discriminator_objective(bundle: DrstBundle, res: TranslationResult):
    """Discriminator-side losses on detached translations. Returns (loss, adv_x, adv_y)."""
    adv_x = adv_loss(bundle.discriminator_x(res.x.pixels), bundle.discriminator_x(res.x_hat.pixels.detach()))
    adv_y = adv_loss(bundle.discriminator_y(res.y.pixels), bundle.discriminator_y(res.y_hat.pixels.detach()))
    dc_loss, _ = content_adv_loss(
        bundle.content_discriminator(res.latents["c_x"].features.detach()),
        bundle.content_discriminator(res.latents["c_y"].features.detach()),
    )
    return -(adv_x + adv_y) + dc_loss, adv_x, adv_y


def translator_objective(bundle: DrstBundle, res: TranslationResult, weights: LossWeights):
    gen_adv = (generator_adv_loss(bundle.discriminator_x(res.x_hat.pixels))
               + generator_adv_loss(bundle.discriminator_y(res.y_hat.pixels)))
    cyc = cycle_loss(res.x, res.x_rec, res.y, res.y_rec)
    _, enc_loss = content_adv_loss(
        bundle.content_discriminator(res.latents["c_x"].features),
        bundle.content_discriminator(res.latents["c_y"].features),
    )
    total = weights.adv * gen_adv + weights.cyc * cyc + weights.content * enc_loss
    return total, cyc, enc_loss


def drst_train_step(bundle: DrstBundle, x: ImageBatch, y: ImageBatch, optimizers: DrstOptimizers,
                    weights: LossWeights | None = None, phase: TrainPhase | None = None) -> LossReport:
    """One alternating update: discriminators first, then encoders and generators.

    A non-finite loss raises NonFiniteError and leaves parameters and
    optimizer state as they were before the call.
    """
    weights = weights or LossWeights()
    phase = phase or TrainPhase(Stage.DRST_PRETRAIN)

    res = translate(bundle, x, y)
    # taken before any discriminator forward, which moves spectral-norm buffers
    snapshot = (
        {name: copy.deepcopy(getattr(bundle, name).state_dict()) for name in DISCRIMINATORS},
        copy.deepcopy(optimizers.discriminators.state_dict()),
    )

    def restore():
        for name, state in snapshot[0].items():
            getattr(bundle, name).load_state_dict(state)
        optimizers.discriminators.load_state_dict(snapshot[1])

    # discriminator update sees detached translations only
    d_loss, adv_x, adv_y = discriminator_objective(bundle, res)
    if not _finite(d_loss):
        restore()
        raise NonFiniteError("discriminator loss is not finite")
    optimizers.discriminators.zero_grad(set_to_none=True)
    d_loss.backward()
    optimizers.discriminators.step()

    g_loss, cyc, enc_loss = translator_objective(bundle, res, weights)
    if not _finite(g_loss):
        restore()
        raise NonFiniteError("translator loss is not finite")
    optimizers.translators.zero_grad(set_to_none=True)
    g_loss.backward()
    optimizers.translators.step()
    # discriminator grads from the translator pass must not leak into the next step
    optimizers.discriminators.zero_grad(set_to_none=True)

    return LossReport(
        {"adv_x": adv_x.item(), "adv_y": adv_y.item(), "content_adv": enc_loss.item(), "cyc": cyc.item()},
        epoch=phase.epoch, phase=phase,
    )


@torch.no_grad()
def drst_eval_losses(bundle: DrstBundle, x: ImageBatch, y: ImageBatch, weights: LossWeights | None = None) -> dict:
    """Loss terms for a batch without any parameter update."""
    weights = weights or LossWeights()
    res = translate(bundle, x, y)
    # eval mode keeps spectral-norm power iterations from touching their buffers
    modes = {name: getattr(bundle, name).training for name in DISCRIMINATORS}
    for name in DISCRIMINATORS:
        getattr(bundle, name).eval()
    try:
        _, adv_x, adv_y = discriminator_objective(bundle, res)
        _, cyc, enc = translator_objective(bundle, res, weights)
    finally:
        for name, mode in modes.items():
            getattr(bundle, name).train(mode)
    return {"adv_x": adv_x.item(), "adv_y": adv_y.item(), "content_adv": enc.item(), "cyc": cyc.item()}
