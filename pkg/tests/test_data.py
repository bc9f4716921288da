import numpy as np
import pytest

from dyngrain import grained
from dyngrain.data import SyntheticSpec, generate_synthetic, load_image_dir, synthetic_corpus
from dyngrain.io import save_png

SPEC = SyntheticSpec(count=40)


def test_pure_and_clamped():
    a, la = generate_synthetic(SPEC, 7)
    b, lb = generate_synthetic(SPEC, 7)
    assert np.array_equal(a, b) and la == lb
    assert a.dtype == np.float32 and a.min() >= 0 and a.max() <= 1 and a.shape == (64, 64, 3)
    with pytest.raises(IndexError):
        generate_synthetic(SPEC, 40)


def test_textured_tiles_have_higher_entropy():
    tex, bg = [], []
    for i in range(SPEC.count):
        img, _, mask = generate_synthetic(SPEC, i, with_mask=True)
        em = grained.image_entropy_map(img, 8)
        cover = mask.reshape(8, 8, 8, 8).mean(axis=(1, 3))
        tex.extend(em[cover == 1].tolist())
        bg.extend(em[cover == 0].tolist())
    assert np.mean(tex) > np.mean(bg)


def test_corpus_labels_cover_classes():
    images, labels = synthetic_corpus(SPEC)
    assert images.shape == (40, 64, 64, 3) and set(labels.tolist()) <= set(range(SPEC.num_classes))
    assert len(set(labels.tolist())) > 1


def test_load_image_dir(tmp_path):
    for cls in ("cats", "dogs"):
        (tmp_path / cls).mkdir()
        save_png(tmp_path / cls / "a.png", np.random.default_rng(0).random((40, 50, 3)))
    images, labels = load_image_dir(tmp_path, 32)
    assert images.shape == (2, 32, 32, 3) and labels.tolist() == [0, 1]
    with pytest.raises(FileNotFoundError):
        load_image_dir(tmp_path / "cats" / "none", 32)
