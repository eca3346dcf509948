"""Deterministic synthetic corpus for desk-scale end-to-end runs.

Generates disc-on-black dermoscopy stand-ins (which exercise the FOV
cropper), per-class Gaussian feature clusters with replicates (standing in
for frozen-CNN outputs), and meta records with controlled missingness.
Everything is drawn from a single seeded generator, so a fixed seed yields
a byte-identical corpus.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .constants import CLASSES, SEXES, SITES, UNK
from .features import FeatureStore
from .folds import ManifestRow, write_manifest
from .imaging import save_image
from .meta import MetaRecord

LESION_SIZES = (1, 1, 1, 2, 2, 3)


def sample_meta_record(rng: np.random.Generator, missing_rate: float) -> MetaRecord:
    """Random meta record; each property is independently missing at the given rate."""
    present = rng.random(3) >= missing_rate
    return MetaRecord(
        age=float(5 * rng.integers(0, 18)) if present[0] else None,
        site=SITES[rng.integers(len(SITES))] if present[1] else None,
        sex=SEXES[rng.integers(len(SEXES))] if present[2] else None,
    )


def render_disc_image(rng: np.random.Generator, size_range: tuple[int, int]
                      ) -> np.ndarray:
    """Bright colored disc on black, like an uncropped dermoscopy FOV."""
    h = int(rng.integers(size_range[0], size_range[1] + 1))
    w = int(rng.integers(size_range[0], size_range[1] + 1))
    radius = float(min(h, w)) * rng.uniform(0.28, 0.42)
    cx = w / 2.0 + rng.uniform(-0.05, 0.05) * w
    cy = h / 2.0 + rng.uniform(-0.05, 0.05) * h
    color = rng.uniform(0.35, 0.95, size=3)
    yy, xx = np.ogrid[:h, :w]
    mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    img = np.zeros((h, w, 3))
    img[mask] = color
    return img


def generate_corpus(out_dir, n_images: int = 200, n_classes: int = 9, seed: int = 0,
                    feature_dim: int = 16, replicates: int = 4,
                    missing_rate: float = 0.3, separation: float = 6.0,
                    size_range: tuple[int, int] = (640, 900),
                    render_images: bool = True) -> dict:
    """Write images/, manifest.csv, external.csv (when UNK is present) and features.bin.

    Images are grouped into lesions of 1-3 images sharing a class; classes
    rotate round-robin over lesions. UNK rows are external and carry no
    meta data. Features are class-cluster centers plus unit noise, with
    small per-replicate jitter.
    """
    if n_images < 1 or not 2 <= n_classes <= len(CLASSES):
        raise ValueError(f"bad corpus sizes: {n_images} images, {n_classes} classes")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    # separate stream for pixels, so skipping the render leaves the data intact
    img_rng = np.random.default_rng([seed, 1])

    centers = rng.normal(size=(n_classes, feature_dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)

    rows: list[ManifestRow] = []
    ids: list[str] = []
    feats = np.zeros((n_images, replicates, feature_dim), dtype=np.float32)
    image_idx = 0
    lesion_idx = 0
    while image_idx < n_images:
        cls_idx = lesion_idx % n_classes
        label = CLASSES[cls_idx]
        size = int(rng.choice(LESION_SIZES))
        size = min(size, n_images - image_idx)
        lesion = f"les{lesion_idx:05d}"
        for _ in range(size):
            image = f"img{image_idx:05d}"
            if label == UNK:
                meta = MetaRecord()  # the unknown-class pool has no meta data
                source = "external"
            else:
                meta = sample_meta_record(rng, missing_rate)
                source = "main"
            rows.append(ManifestRow(image, lesion, label, source, meta))
            base = centers[cls_idx] + rng.normal(size=feature_dim)
            feats[image_idx] = (base + 0.1 * rng.normal(size=(replicates, feature_dim))
                                ).astype(np.float32)
            ids.append(image)
            if render_images:
                save_image(out_dir / "images" / f"{image}.png",
                           render_disc_image(img_rng, size_range))
            image_idx += 1
        lesion_idx += 1

    main_rows = [r for r in rows if r.source == "main"]
    ext_rows = [r for r in rows if r.source == "external"]
    write_manifest(out_dir / "manifest.csv", main_rows)
    if ext_rows:
        write_manifest(out_dir / "external.csv", ext_rows)
    FeatureStore(ids, feats).save(out_dir / "features.bin")
    return {
        "images": n_images,
        "main_rows": len(main_rows),
        "external_rows": len(ext_rows),
        "lesions": lesion_idx,
        "feature_dim": feature_dim,
        "replicates": replicates,
    }
