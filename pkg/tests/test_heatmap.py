import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from daug.classifier import NoisyClassifier
from daug.diffusion import GuidanceSpec, UNet, make_schedule
from daug.errors import StaleCacheError
from daug.heatmap import augment_channels, generate_bank, load_bank, make_heatmap, translate_batch
from daug.metrics import heatmap_localization
from daug.synthdata import DatasetSpec, generate_split, render_sample
from daug.taxonomy import FINE_CLASSES

unit_images = arrays(np.float64, (8, 8), elements=st.floats(0, 1))


def test_identity_gives_zero_heatmap():
    img = np.random.default_rng(0).random((8, 8))
    assert not make_heatmap(img, img, 1).any()


def test_single_pixel_difference():
    a = np.zeros((6, 6))
    b = a.copy()
    b[2, 3] = 0.5
    h = make_heatmap(a, b, 0)
    assert h[2, 3] == 1.0 and h.sum() == 1.0


@given(unit_images, unit_images)
@settings(max_examples=50, deadline=None)
def test_symmetric_and_normalized(a, b):
    h = make_heatmap(a, b, 1)
    assert np.array_equal(h, make_heatmap(b, a, 1))
    if h.any():
        assert h.max() == 1.0 and h.min() == 0.0


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        make_heatmap(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        augment_channels(np.zeros((4, 4)), np.zeros((5, 4)))


def test_augment_channels_layout():
    img = np.random.default_rng(1).random((5, 5)).astype(np.float32)
    x = augment_channels(img, np.zeros_like(img))
    assert x.shape == (3, 5, 5)
    assert np.array_equal(x[0], img) and np.array_equal(x[1], img) and not x[2].any()


def test_cardiomegaly_translation_points_at_the_heart_boundary():
    labels = np.zeros(len(FINE_CLASSES), dtype=np.int64)
    labels[FINE_CLASSES.index("Cardiomegaly")] = 1
    healthy = np.zeros_like(labels)
    healthy[0] = 1
    for seed in range(10):
        sick = render_sample("s", labels, 32, np.random.default_rng(seed))
        base = render_sample("s", healthy, 32, np.random.default_rng(seed))
        # identical anatomy, only the enlarged-heart ring differs
        mask = sick.masks[FINE_CLASSES.index("Cardiomegaly")]
        assert np.array_equal(np.abs(sick.image - base.image) > 1e-6, mask)
        r = heatmap_localization(make_heatmap(base.image, sick.image, 1), mask)
        assert r["pointing_hit"]


@pytest.fixture(scope="module")
def tiny_models():
    torch.manual_seed(0)
    return UNet(8).eval(), NoisyClassifier(7, 8).eval(), make_schedule(20)


@pytest.fixture(scope="module")
def tiny_samples():
    return generate_split(DatasetSpec(image_size=16, seed=2), "test", 5)


def test_translate_batch_independent_of_batch_composition(tiny_models, tiny_samples):
    den, clf, sch = tiny_models
    imgs = np.stack([s.image for s in tiny_samples])
    ids = [s.id for s in tiny_samples]
    g = GuidanceSpec(0, 1, "softmax", 3.0)
    full = translate_batch(imgs, ids, g, den, clf, sch, 10, 0)
    part = translate_batch(imgs[2:4], ids[2:4], g, den, clf, sch, 10, 0)
    np.testing.assert_allclose(full[2:4], part, atol=1e-6)


def test_bank_cache_and_staleness(tmp_path, tiny_models, tiny_samples):
    den, clf, sch = tiny_models
    guides = [GuidanceSpec(0, 1, "softmax", 3.0), GuidanceSpec(2, -1, "sigmoid", 3.0)]
    bank = generate_bank(tiny_samples, guides, den, clf, sch, tmp_path, 10)
    assert bank.computed == 10 and bank.cache_hits == 0 and len(bank) == 10
    for g in guides:
        assert (tmp_path / g.key / "provenance.json").exists()
        assert len(list((tmp_path / g.key).glob("*.png"))) == 5
        assert not list((tmp_path / g.key).glob("*.tmp"))

    again = generate_bank(tiny_samples, guides, den, clf, sch, tmp_path, 10)
    assert again.computed == 0 and again.cache_hits == 10
    for key in bank.records:
        assert np.array_equal(bank.records[key].heatmap, again.records[key].heatmap)

    loaded = load_bank(tmp_path, guides[0])
    s = tiny_samples[0]
    assert np.array_equal(loaded.get(s.id, guides[0]), bank.get(s.id, guides[0]))
    assert loaded.records[(s.id, guides[0].key)].provenance["t_start"] == 10

    with pytest.raises(StaleCacheError):
        generate_bank(tiny_samples, guides, den, clf, sch, tmp_path, 12)
    other = UNet(8).eval()
    with pytest.raises(StaleCacheError):
        generate_bank(tiny_samples, guides, other, clf, sch, tmp_path, 10)


def test_bank_recomputes_changed_images(tmp_path, tiny_models, tiny_samples):
    den, clf, sch = tiny_models
    g = [GuidanceSpec(0, 1, "softmax", 3.0)]
    generate_bank(tiny_samples, g, den, clf, sch, tmp_path, 10)
    meta = json.loads((tmp_path / g[0].key / "provenance.json").read_text())
    meta["entries"][tiny_samples[1].id] = "0" * 16
    (tmp_path / g[0].key / "provenance.json").write_text(json.dumps(meta))
    bank = generate_bank(tiny_samples, g, den, clf, sch, tmp_path, 10)
    assert bank.computed == 1 and bank.cache_hits == 4


def test_bank_without_cache_dir_is_deterministic(tiny_models, tiny_samples):
    den, clf, sch = tiny_models
    g = [GuidanceSpec(3, 1, "softmax", 3.0)]
    a = generate_bank(tiny_samples, g, den, clf, sch, None, 10, batch_size=2)
    b = generate_bank(tiny_samples, g, den, clf, sch, None, 10, batch_size=5)
    for key in a.records:
        np.testing.assert_allclose(a.records[key].heatmap, b.records[key].heatmap, atol=1 / 255 + 1e-7)
