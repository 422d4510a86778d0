"""Folder ingestion, preprocessing, splitting and unpaired sampling.

Layout::

    root/{source,target}/images/<id>.png
    root/{source,target}/labels/<id>.png    # 0/255; target labels are eval-only

Target-domain labels are recorded on a manifest entry as ``eval_label_path``
and are only read by :func:`load_eval_set`; nothing on the training side
touches that field.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ..errors import ExhaustedError, LabelError, LayoutError, ShapeError
from ..types import DomainTag, ImageBatch, Mask

IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff", ".jpg", ".jpeg")
TRAIN, TEST = "TRAIN", "TEST"
FOVS = ("3M", "6M", "SYNTH")


@dataclass(frozen=True)
class Entry:
    id: str
    image_path: Path
    domain: DomainTag
    fov: Optional[str] = None
    label_path: Optional[Path] = None
    eval_label_path: Optional[Path] = None


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)
    split: dict = field(default_factory=dict)  # (domain, id) -> TRAIN | TEST

    def select(self, domain: DomainTag, split: str | None = None) -> list:
        return [e for e in self.entries
                if e.domain is domain and (split is None or self.split[(domain, e.id)] == split)]

    def validate(self) -> "DatasetManifest":
        for e in self.entries:
            if (e.domain, e.id) not in self.split:
                raise LayoutError(f"{e.domain.value}/{e.id} has no split")
            if e.domain is DomainTag.SOURCE and e.label_path is None:
                raise LabelError(f"source image {e.id} has no label")
            if e.domain is DomainTag.TARGET and e.label_path is not None:
                raise LabelError(f"target image {e.id} exposes a training label")
        return self


def guess_fov(image_id: str) -> Optional[str]:
    """FOV subset from the file name.

    Accepts explicit ``3M``/``6M`` tags, ``synth`` names, and the OCTA-500
    numbering (10001-10300 are 6M, 10301-10500 are 3M).
    """
    up = image_id.upper()
    if up.startswith("SYNTH"):
        return "SYNTH"
    for tag in ("3M", "6M"):
        if re.search(rf"(^|[^0-9A-Z]){tag}([^0-9A-Z]|$)", up):
            return tag
    if image_id.isdigit():
        n = int(image_id)
        if 10001 <= n <= 10300:
            return "6M"
        if 10301 <= n <= 10500:
            return "3M"
    return None


def _list_images(folder: Path) -> dict:
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_manifest(root_dir, split_seed: int = 0, test_count: int = 50) -> DatasetManifest:
    """Scan ``root_dir`` and mark ``test_count`` ids per domain as TEST.

    The split is a seeded permutation of the sorted ids, so it does not depend
    on directory listing order.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise LayoutError(f"{root} is not a directory")
    manifest = DatasetManifest(root=root)
    for d_index, domain in enumerate(DomainTag):
        img_dir = root / domain.value / "images"
        if not img_dir.is_dir():
            raise LayoutError(f"missing folder {img_dir}")
        images = _list_images(img_dir)
        if not images:
            raise LayoutError(f"no images in {img_dir}")
        lbl_dir = root / domain.value / "labels"
        labels = _list_images(lbl_dir) if lbl_dir.is_dir() else {}
        if test_count >= len(images):
            raise LayoutError(f"test_count={test_count} leaves no {domain.value} training images")
        ids = sorted(images)
        for i in ids:
            if domain is DomainTag.SOURCE:
                if i not in labels:
                    raise LabelError(f"source image {i} has no label in {lbl_dir}")
                entry = Entry(i, images[i], domain, guess_fov(i), label_path=labels[i])
            else:
                entry = Entry(i, images[i], domain, guess_fov(i), eval_label_path=labels.get(i))
            manifest.entries.append(entry)
        order = np.random.default_rng([split_seed, d_index]).permutation(len(ids))
        test_ids = {ids[k] for k in order[:test_count]}
        for i in ids:
            manifest.split[(domain, i)] = TEST if i in test_ids else TRAIN
    return manifest.validate()


MANIFEST_COLUMNS = ("id", "domain", "split", "fov", "image_path", "label_path", "eval_label_path")


def write_manifest_table(manifest: DatasetManifest, path) -> None:
    """One tab-separated row per entry; paths relative to the manifest root."""
    def rel(p):
        return "" if p is None else Path(p).relative_to(manifest.root).as_posix()

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            w.writerow([e.id, e.domain.value, manifest.split[(e.domain, e.id)], e.fov or "",
                        rel(e.image_path), rel(e.label_path), rel(e.eval_label_path)])


def read_manifest_table(path) -> DatasetManifest:
    path = Path(path)
    manifest = DatasetManifest(root=path.parent)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            domain = DomainTag(row["domain"])
            opt = lambda k: manifest.root / row[k] if row[k] else None  # noqa: E731
            manifest.entries.append(Entry(row["id"], manifest.root / row["image_path"], domain,
                                          row["fov"] or None, opt("label_path"), opt("eval_label_path")))
            manifest.split[(domain, row["id"])] = row["split"]
    return manifest.validate()


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L") if im.mode not in ("L", "I;16", "I") else im)
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def save_image(path, array: np.ndarray) -> None:
    """Write a [0, 1] float array as 8-bit grayscale PNG."""
    data = np.clip(np.rint(np.asarray(array, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path, format="PNG")


def _to_unit(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image)
    if np.issubdtype(a.dtype, np.integer):
        return a.astype(np.float32) / float(np.iinfo(a.dtype).max)
    return np.clip(a.astype(np.float32), 0.0, 1.0)


def preprocess(image, size: int, invert: bool = False, domain: DomainTag = DomainTag.SOURCE,
               image_id: str | None = None) -> ImageBatch:
    """Scale to [0, 1], bilinear-resize to ``size`` x ``size``, optionally invert."""
    a = np.asarray(image)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D grayscale image, got shape {a.shape}")
    t = torch.from_numpy(_to_unit(a))[None, None]
    if t.shape[-2:] != (size, size):
        t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False).clamp(0.0, 1.0)
    if invert:
        t = 1.0 - t
    return ImageBatch(t, domain, (image_id,) if image_id else ())


def preprocess_mask(label, size: int) -> torch.Tensor:
    """Nearest-neighbour resize of a label image; any nonzero value is vessel."""
    a = np.asarray(label)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D label image, got shape {a.shape}")
    t = torch.from_numpy((a > 0).astype(np.uint8))[None, None].float()
    if t.shape[-2:] != (size, size):
        t = F.interpolate(t, size=(size, size), mode="nearest")
    return t[0, 0].to(torch.uint8)


@dataclass
class DomainData:
    """Preprocessed images of one domain/split held in memory."""

    domain: DomainTag
    ids: tuple
    pixels: torch.Tensor          # [N, 1, S, S]
    labels: Optional[torch.Tensor] = None  # [N, S, S] uint8

    def __len__(self):
        return len(self.ids)

    def batch(self, index) -> ImageBatch:
        index = list(index)
        return ImageBatch(self.pixels[index], self.domain, tuple(self.ids[i] for i in index))

    def mask(self, index) -> Mask:
        if self.labels is None:
            raise LabelError(f"no labels loaded for {self.domain.value}")
        return Mask(self.labels[list(index)])


def _load_domain(entries, size, invert, label_attr, domain) -> DomainData:
    if not entries:
        raise LayoutError(f"no {domain.value} entries selected")
    pixels, labels = [], []
    for e in entries:
        pixels.append(preprocess(load_image(e.image_path), size, invert, domain).pixels[0])
        lp = getattr(e, label_attr) if label_attr else None
        if label_attr and lp is None:
            raise LabelError(f"{domain.value} image {e.id} has no label")
        if lp is not None:
            labels.append(preprocess_mask(load_image(lp), size))
    return DomainData(domain, tuple(e.id for e in entries), torch.stack(pixels),
                      torch.stack(labels) if labels else None)


def load_train_set(manifest: DatasetManifest, domain: DomainTag, size: int, invert: bool = False) -> DomainData:
    """Training images; labels only for the source domain."""
    entries = manifest.select(domain, TRAIN)
    return _load_domain(entries, size, invert, "label_path" if domain is DomainTag.SOURCE else None, domain)


def load_eval_set(manifest: DatasetManifest, domain: DomainTag, size: int, invert: bool = False,
                  split: str = TEST) -> DomainData:
    """Images with their evaluation labels (target labels included).

    Also used to train the target-supervised oracle baseline, which is an
    evaluation reference rather than part of the adaptation pipeline.
    """
    attr = "label_path" if domain is DomainTag.SOURCE else "eval_label_path"
    return _load_domain(manifest.select(domain, split), size, invert, attr, domain)


class UnpairedSampler:
    """Independent draws without replacement from each domain within an epoch.

    An epoch ends when the smaller domain cannot fill another batch; the next
    call raises :class:`ExhaustedError` and the caller must :meth:`reset`.
    """

    def __init__(self, source: DomainData, target: DomainData, batch_size: int, rng: np.random.Generator):
        if source.labels is None:
            raise LabelError("source training data must carry labels")
        self.source, self.target = source, target
        self.batch_size = batch_size
        self.rng = rng
        self.reset()

    @property
    def steps_per_epoch(self) -> int:
        return min(len(self.source), len(self.target)) // self.batch_size

    def reset(self, rng: np.random.Generator | None = None) -> None:
        if rng is not None:
            self.rng = rng
        self._order_s = self.rng.permutation(len(self.source))
        self._order_t = self.rng.permutation(len(self.target))
        self._pos = 0

    def sample_unpaired(self):
        """Return ``((x, gt_x), y)``; y never comes with a label."""
        lo, hi = self._pos, self._pos + self.batch_size
        if hi > len(self._order_s) or hi > len(self._order_t):
            raise ExhaustedError("epoch exhausted; call reset()")
        self._pos = hi
        si, ti = self._order_s[lo:hi], self._order_t[lo:hi]
        return (self.source.batch(si), self.source.mask(si)), self.target.batch(ti)

    def __iter__(self):
        while True:
            try:
                yield self.sample_unpaired()
            except ExhaustedError:
                return
