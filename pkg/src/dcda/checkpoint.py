"""Checkpoint archives: symbol-keyed parameter tensors, optimizer state and a manifest."""
from __future__ import annotations

import dataclasses
import os
from pathlib import Path

import torch

FORMAT_VERSION = 1


def seg_state(prefix: str, model) -> dict:
    return {f"{prefix}.{k}": v for k, v in model.state_dict().items()}


def load_seg_state(model, state: dict, prefix: str) -> None:
    p = prefix + "."
    model.load_state_dict({k[len(p):]: v for k, v in state.items() if k.startswith(p)})


def drst_manifest(bundle) -> dict:
    arch = bundle.arch
    return {
        "style_dim": arch.style_dim,
        "content_channels": arch.content_ch,
        "encoder_base": arch.enc_base,
        "downsample": 2 ** arch.n_down,
        "shared_layer_key": bundle.shared_layer_key,
        "arch": dataclasses.asdict(arch),
    }


def save(path, params: dict, optimizers: dict | None = None, manifest: dict | None = None, **extra) -> Path:
    """Write atomically, so an interrupted save never clobbers the last good file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format": FORMAT_VERSION, "params": params, "optimizers": optimizers or {},
               "manifest": manifest or {}, **extra}
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
    return payload
