import numpy as np
import pytest
import torch
from PIL import Image

from dcda.data import (
    TEST,
    TRAIN,
    PhantomSpec,
    UnpairedSampler,
    generate_phantoms,
    load_eval_set,
    load_image,
    load_manifest,
    load_train_set,
    phantom_pair,
    preprocess,
    preprocess_mask,
    read_manifest_table,
    save_image,
    write_manifest_table,
)
from dcda.data.dataset import guess_fov
from dcda.errors import ExhaustedError, LabelError, LayoutError, ShapeError
from dcda.types import DomainTag


def write_png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


def make_layout(root, n_source=6, n_target=6, size=8, target_labels=True, skip_source_label=None):
    r = np.random.default_rng(0)
    for domain, n in (("source", n_source), ("target", n_target)):
        for i in range(n):
            name = f"{10001 + i}.png"
            write_png(root / domain / "images" / name, r.integers(0, 256, (size, size)))
            if domain == "target" and not target_labels:
                continue
            if domain == "source" and i == skip_source_label:
                continue
            write_png(root / domain / "labels" / name, (r.random((size, size)) > 0.8) * 255)
    return root


@pytest.fixture(scope="module")
def phantom_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantoms")
    generate_phantoms(PhantomSpec(seed=3, image_size=32, n_images=12, test_count=4), root)
    return root


def test_split_counts_for_octa_sized_folder(tmp_path):
    make_layout(tmp_path, n_source=445, n_target=445, size=4)
    m = load_manifest(tmp_path, split_seed=0, test_count=50)
    for d in DomainTag:
        assert len(m.select(d, TRAIN)) == 395
        assert len(m.select(d, TEST)) == 50


def test_split_is_deterministic_and_seeded(tmp_path):
    make_layout(tmp_path, 20, 20)
    a = load_manifest(tmp_path, split_seed=1, test_count=5)
    b = load_manifest(tmp_path, split_seed=1, test_count=5)
    c = load_manifest(tmp_path, split_seed=2, test_count=5)
    assert a.split == b.split
    assert a.split != c.split


def test_missing_or_empty_folders(tmp_path):
    with pytest.raises(LayoutError):
        load_manifest(tmp_path / "nope")
    (tmp_path / "source" / "images").mkdir(parents=True)
    (tmp_path / "target" / "images").mkdir(parents=True)
    with pytest.raises(LayoutError):
        load_manifest(tmp_path, test_count=0)


def test_missing_source_label(tmp_path):
    make_layout(tmp_path, skip_source_label=2)
    with pytest.raises(LabelError):
        load_manifest(tmp_path, test_count=1)


def test_test_count_too_large(tmp_path):
    make_layout(tmp_path, 4, 4)
    with pytest.raises(LayoutError):
        load_manifest(tmp_path, test_count=4)


def test_target_labels_are_eval_only(tmp_path):
    make_layout(tmp_path)
    m = load_manifest(tmp_path, test_count=2)
    for e in m.select(DomainTag.TARGET):
        assert e.label_path is None and e.eval_label_path is not None
    train = load_train_set(m, DomainTag.TARGET, 8)
    assert train.labels is None
    with pytest.raises(LabelError):
        train.mask([0])
    assert load_eval_set(m, DomainTag.TARGET, 8).labels.shape == (2, 8, 8)


def test_target_without_labels_cannot_be_evaluated(tmp_path):
    make_layout(tmp_path, target_labels=False)
    m = load_manifest(tmp_path, test_count=2)
    assert load_train_set(m, DomainTag.TARGET, 8).labels is None
    with pytest.raises(LabelError):
        load_eval_set(m, DomainTag.TARGET, 8)


def test_manifest_table_round_trip(tmp_path):
    make_layout(tmp_path)
    m = load_manifest(tmp_path, test_count=2)
    write_manifest_table(m, tmp_path / "manifest.tsv")
    back = read_manifest_table(tmp_path / "manifest.tsv")
    assert back.split == m.split
    assert back.entries == m.entries


def test_guess_fov():
    assert guess_fov("10001") == "6M"
    assert guess_fov("10450") == "3M"
    assert guess_fov("synth0003") == "SYNTH"
    assert guess_fov("scan_3M_01") == "3M"
    assert guess_fov("other") is None


def test_preprocess_resizes_and_scales():
    img = np.full((304, 304), 255, dtype=np.uint8)
    b = preprocess(img, 384, image_id="a")
    assert b.pixels.shape == (1, 1, 384, 384)
    assert torch.allclose(b.pixels, torch.ones_like(b.pixels))
    assert b.ids == ("a",)


def test_preprocess_same_size_is_exact():
    img = np.random.default_rng(0).integers(0, 256, (16, 16)).astype(np.uint8)
    b = preprocess(img, 16)
    assert torch.equal(b.pixels[0, 0], torch.from_numpy(img.astype(np.float32) / 255))


def test_preprocess_16bit_and_bad_shape():
    img = np.full((4, 4), 65535, dtype=np.uint16)
    assert preprocess(img, 4).pixels.max().item() == 1.0
    with pytest.raises(ShapeError):
        preprocess(np.zeros((4, 4, 3)), 4)


def test_inversion_is_an_involution():
    img = np.random.default_rng(1).random((10, 10))
    once = preprocess(img, 10, invert=True).pixels
    assert torch.allclose(preprocess(once[0, 0].numpy(), 10, invert=True).pixels, torch.from_numpy(img).float())


def test_mask_resize_stays_binary():
    lbl = np.zeros((304, 304), np.uint8)
    lbl[100:200, 50:60] = 255
    m = preprocess_mask(lbl, 384)
    assert m.shape == (384, 384)
    assert set(m.unique().tolist()) == {0, 1}


def test_png_round_trip(tmp_path):
    a = np.linspace(0, 1, 64).reshape(8, 8)
    save_image(tmp_path / "a.png", a)
    back = load_image(tmp_path / "a.png")
    assert back.dtype == np.uint8
    assert np.abs(back / 255 - a).max() <= 0.5 / 255 + 1e-9


def test_unreadable_image(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(OSError):
        load_image(tmp_path / "bad.png")


def _sampler(root, batch_size=3, seed=0):
    m = load_manifest(root, split_seed=3, test_count=4)
    src = load_train_set(m, DomainTag.SOURCE, 32)
    tgt = load_train_set(m, DomainTag.TARGET, 32)
    return UnpairedSampler(src, tgt, batch_size, np.random.default_rng(seed))


def test_sampler_batches_and_exhaustion(phantom_root):
    s = _sampler(phantom_root)
    assert s.steps_per_epoch == 8 // 3
    (x, gt), y = s.sample_unpaired()
    assert x.domain is DomainTag.SOURCE and y.domain is DomainTag.TARGET
    assert x.pixels.shape == (3, 1, 32, 32) and gt.labels.shape == (3, 32, 32)
    s.sample_unpaired()
    with pytest.raises(ExhaustedError):
        s.sample_unpaired()
    s.reset()
    assert len(list(s)) == 2


def test_sampler_no_repeats_within_epoch(phantom_root):
    s = _sampler(phantom_root, batch_size=2)
    seen = [i for (x, _), _ in s for i in x.ids]
    assert len(seen) == len(set(seen)) == 8


def test_sampler_is_seeded(phantom_root):
    a = [x.ids for (x, _), _ in _sampler(phantom_root, seed=5)]
    b = [x.ids for (x, _), _ in _sampler(phantom_root, seed=5)]
    assert a == b


def test_sampler_needs_source_labels(phantom_root):
    m = load_manifest(phantom_root, split_seed=3, test_count=4)
    tgt = load_train_set(m, DomainTag.TARGET, 32)
    with pytest.raises(LabelError):
        UnpairedSampler(tgt, tgt, 2, np.random.default_rng(0))


# -- phantoms

def test_phantoms_deterministic():
    spec = PhantomSpec(seed=11, image_size=48)
    a_img, a_mask = phantom_pair(spec, DomainTag.TARGET, 3)
    b_img, b_mask = phantom_pair(spec, DomainTag.TARGET, 3)
    assert np.array_equal(a_img, b_img) and np.array_equal(a_mask, b_mask)
    c_img, _ = phantom_pair(spec, DomainTag.TARGET, 4)
    assert not np.array_equal(a_img, c_img)


def test_phantom_coverage_and_polarity():
    spec = PhantomSpec(seed=1, image_size=64)
    for i in range(5):
        img_a, mask_a = phantom_pair(spec, DomainTag.SOURCE, i)
        img_b, mask_b = phantom_pair(spec, DomainTag.TARGET, i)
        for mask in (mask_a, mask_b):
            assert 0.02 <= mask.mean() <= 0.30
        assert img_a[mask_a].mean() > img_a[~mask_a].mean() + 0.3
        assert img_b[mask_b].mean() < img_b[~mask_b].mean() - 0.2
        assert 0 <= img_b.min() and img_b.max() <= 1


def test_generated_layout(phantom_root):
    m = read_manifest_table(phantom_root / "manifest.tsv")
    assert len(m.select(DomainTag.SOURCE, TEST)) == 4
    assert len(m.select(DomainTag.TARGET, TRAIN)) == 8
    assert all(e.fov == "SYNTH" for e in m.entries)


def test_invert_constant_image():
    b = preprocess(np.full((5, 5), 0.3), 5, invert=True)
    assert torch.allclose(b.pixels, torch.full_like(b.pixels, 0.7))
