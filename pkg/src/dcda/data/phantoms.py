"""Synthetic two-domain vessel phantoms.

Style A: bright vessels on a dark, mildly textured background.
Style B: inverted contrast, gamma 1.5, Gaussian blur, stronger noise.
Each image gets its own random geometry, so the domains are unpaired.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from ..types import DomainTag

MIN_POSITIVE = 0.02
MAX_POSITIVE = 0.30


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 7
    image_size: int = 64
    n_images: int = 10
    branches: tuple = (2, 5)
    width: tuple = (1.0, 3.0)
    curvature: float = 0.35
    noise_a: float = 0.02
    gamma_b: float = 1.5
    blur_b: float = 0.7
    noise_b: float = 0.05
    test_count: int = 0

    def __post_init__(self):
        if self.image_size < 8 or self.n_images < 1:
            raise ValueError("image_size must be >= 8 and n_images >= 1")
        if not 0 <= self.test_count < self.n_images:
            raise ValueError("test_count must be smaller than n_images")


def _bezier(p0, p1, p2, n=128):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def _draw_polyline(canvas, curve, half_width):
    """OR a thick curve into ``canvas``: rasterized centreline grown by a distance transform."""
    s = canvas.shape[0]
    centre = np.ones_like(canvas)
    idx = np.rint(curve).astype(int)
    idx = idx[((idx >= 0) & (idx < s)).all(axis=1)]
    if len(idx) == 0:
        return
    centre[idx[:, 0], idx[:, 1]] = False
    canvas |= distance_transform_edt(centre) <= half_width


def vessel_mask(rng: np.random.Generator, spec: PhantomSpec) -> np.ndarray:
    """Random branching vessel tree as a boolean mask; retries until coverage is in range."""
    s = spec.image_size
    while True:
        mask = np.zeros((s, s), dtype=bool)
        for _ in range(rng.integers(spec.branches[0], spec.branches[1] + 1)):
            start = rng.uniform(0.3 * s, 0.7 * s, size=2)
            angle = rng.uniform(0, 2 * np.pi)
            end = start + 0.9 * s * np.array([np.sin(angle), np.cos(angle)])
            mid = (start + end) / 2 + rng.normal(0, spec.curvature * s, size=2)
            curve = _bezier(start, mid, end)
            width = rng.uniform(*spec.width)
            _draw_polyline(mask, curve, width / 2)
            # one thinner child branch leaving from a random point of the parent
            if rng.random() < 0.7:
                k = rng.integers(len(curve) // 4, 3 * len(curve) // 4)
                child_angle = angle + rng.choice([-1, 1]) * rng.uniform(0.4, 1.2)
                c0 = curve[k]
                c2 = c0 + 0.4 * s * np.array([np.sin(child_angle), np.cos(child_angle)])
                c1 = (c0 + c2) / 2 + rng.normal(0, spec.curvature * s / 2, size=2)
                _draw_polyline(mask, _bezier(c0, c1, c2), max(spec.width[0], 0.7 * width) / 2)
        frac = mask.mean()
        if MIN_POSITIVE <= frac <= MAX_POSITIVE:
            return mask


def _background(rng, s):
    tex = gaussian_filter(rng.normal(0, 1, (s, s)), sigma=s / 8)
    tex = (tex - tex.min()) / (np.ptp(tex) + 1e-12)
    return 0.08 + 0.12 * tex


def render_style_a(rng, mask, spec: PhantomSpec) -> np.ndarray:
    s = spec.image_size
    img = _background(rng, s)
    vessel = 0.65 + 0.25 * rng.random()
    img = np.where(mask, vessel, img)
    img = gaussian_filter(img, 0.5)
    img = img + rng.normal(0, spec.noise_a, img.shape)
    return np.clip(img, 0.0, 1.0)


def render_style_b(rng, mask, spec: PhantomSpec) -> np.ndarray:
    img = render_style_a(rng, mask, spec)
    img = (1.0 - img) ** spec.gamma_b
    img = gaussian_filter(img, spec.blur_b)
    img = img + rng.normal(0, spec.noise_b, img.shape)
    return np.clip(img, 0.0, 1.0)


def phantom_pair(spec: PhantomSpec, domain: DomainTag, index: int):
    """Image and mask for one phantom; depends only on (seed, domain, index)."""
    dom = 0 if domain is DomainTag.SOURCE else 1
    rng = np.random.default_rng([spec.seed, dom, index])
    mask = vessel_mask(rng, spec)
    render = render_style_a if domain is DomainTag.SOURCE else render_style_b
    return render(rng, mask, spec), mask


def generate_phantoms(spec: PhantomSpec, out_dir):
    """Write both domains under ``out_dir`` in the folder layout and return the manifest.

    Target masks go to ``target/labels``, which only evaluation reads.
    """
    from .dataset import load_manifest, save_image, write_manifest_table

    out = Path(out_dir)
    for domain in DomainTag:
        img_dir = out / domain.value / "images"
        lbl_dir = out / domain.value / "labels"
        img_dir.mkdir(parents=True, exist_ok=True)
        lbl_dir.mkdir(parents=True, exist_ok=True)
        for i in range(spec.n_images):
            img, mask = phantom_pair(spec, domain, i)
            name = f"synth{i:04d}.png"
            save_image(img_dir / name, img)
            save_image(lbl_dir / name, mask.astype(float))
    manifest = load_manifest(out, split_seed=spec.seed, test_count=spec.test_count)
    write_manifest_table(manifest, out / "manifest.tsv")
    return manifest
