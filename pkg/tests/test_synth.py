from collections import defaultdict

import numpy as np
import pytest

from dermpipe.features import FeatureStore
from dermpipe.folds import load_manifests, read_manifest
from dermpipe.synth import generate_corpus, render_disc_image, sample_meta_record


def test_corpus_layout(tmp_path):
    out = tmp_path / "corpus"
    stats = generate_corpus(out, n_images=30, n_classes=9, seed=0,
                            feature_dim=8, replicates=3, render_images=False)
    assert stats["images"] == 30
    assert stats["main_rows"] + stats["external_rows"] == 30
    assert stats["external_rows"] > 0
    assert not (out / "images").exists()

    rows = load_manifests(out / "manifest.csv", out / "external.csv")
    assert len(rows) == 30
    store = FeatureStore.load(out / "features.bin")
    assert len(store) == 30
    assert store.feature_dim == 8
    assert store.replicates == 3
    assert all(r.image in store for r in rows)

    by_lesion = defaultdict(set)
    for r in rows:
        by_lesion[r.lesion].add(r.label)
        if r.label == "UNK":
            assert r.source == "external"
            assert r.meta.fully_missing()
    assert len(by_lesion) == stats["lesions"]
    assert all(len(labels) == 1 for labels in by_lesion.values())


def test_corpus_features_separable(tmp_path):
    out = tmp_path / "corpus"
    generate_corpus(out, n_images=60, n_classes=5, seed=1, feature_dim=12,
                    replicates=2, separation=8.0, render_images=False)
    rows = read_manifest(out / "manifest.csv")
    store = FeatureStore.load(out / "features.bin")
    labels = sorted({r.label for r in rows})
    centroids = {
        lab: np.mean([store.get(r.image)[0] for r in rows if r.label == lab], axis=0)
        for lab in labels}
    hits = 0
    for r in rows:
        feat = store.get(r.image)[0]
        nearest = min(labels, key=lambda lab: np.linalg.norm(feat - centroids[lab]))
        hits += nearest == r.label
    assert hits / len(rows) > 0.95


def test_corpus_deterministic(tmp_path):
    stats = []
    for run in range(2):
        out = tmp_path / f"run{run}"
        stats.append(generate_corpus(out, n_images=25, seed=7, render_images=False))
        assert stats[-1] == stats[0]
    for name in ("manifest.csv", "external.csv", "features.bin"):
        assert (tmp_path / "run0" / name).read_bytes() == \
               (tmp_path / "run1" / name).read_bytes()


def test_render_does_not_disturb_data(tmp_path):
    a = tmp_path / "rendered"
    b = tmp_path / "bare"
    generate_corpus(a, n_images=6, seed=3, size_range=(48, 64), render_images=True)
    generate_corpus(b, n_images=6, seed=3, size_range=(48, 64), render_images=False)
    assert sorted(p.name for p in (a / "images").glob("*.png")) == \
        [f"img{i:05d}.png" for i in range(6)]
    for name in ("manifest.csv", "features.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_rendered_images_deterministic(tmp_path):
    for run in range(2):
        generate_corpus(tmp_path / f"r{run}", n_images=4, seed=11,
                        size_range=(40, 56), render_images=True)
    for i in range(4):
        name = f"images/img{i:05d}.png"
        assert (tmp_path / "r0" / name).read_bytes() == \
               (tmp_path / "r1" / name).read_bytes()


def test_corpus_validation():
    with pytest.raises(ValueError):
        generate_corpus("/tmp/x", n_images=0)
    with pytest.raises(ValueError):
        generate_corpus("/tmp/x", n_classes=1)
    with pytest.raises(ValueError):
        generate_corpus("/tmp/x", n_classes=10)


def test_sample_meta_record_rates():
    rng = np.random.default_rng(0)
    always = [sample_meta_record(rng, 0.0) for _ in range(50)]
    assert all(r.age is not None and r.site is not None and r.sex is not None
               for r in always)
    never = [sample_meta_record(rng, 1.0) for _ in range(50)]
    assert all(r.fully_missing() for r in never)
    some = [sample_meta_record(rng, 0.5) for _ in range(400)]
    miss = np.mean([r.age is None for r in some])
    assert 0.4 < miss < 0.6


def test_render_disc_image():
    rng = np.random.default_rng(1)
    img = render_disc_image(rng, (60, 80))
    h, w, c = img.shape
    assert 60 <= h <= 80 and 60 <= w <= 80 and c == 3
    assert img.min() >= 0.0 and img.max() <= 1.0
    # corners stay background; the center is inside the disc
    assert np.array_equal(img[0, 0], np.zeros(3))
    assert np.array_equal(img[-1, -1], np.zeros(3))
    assert img[h // 2, w // 2].max() > 0.3
