"""Dermoscopy image preprocessing: FOV cropping, color constancy, resizing.

Raw dermoscopy images often show the circular field of view surrounded by
black. The cropper binarizes the image with a very low threshold, fits the
ellipse with the same second central moments as the foreground, derives an
axis-aligned bounding box, and crops only when the inside/outside intensity
ratio says the border is really there. Shades of Gray color constancy and a
longest-side resize follow. Images are float64 H x W x 3 arrays in [0, 1].
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .errors import DegenerateMask, ZeroChannel
from .ioutil import atomic_write

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


@dataclass(frozen=True)
class EllipseFit:
    """Moment-equivalent ellipse of a binary region (solid-ellipse convention)."""

    centroid_x: float
    centroid_y: float
    semi_major: float
    semi_minor: float
    orientation: float  # radians, in (-pi/2, pi/2]


@dataclass(frozen=True)
class CropBox:
    """Half-open integer pixel bounds [x0, x1) x [y0, y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


@dataclass(frozen=True)
class CropReport:
    """What the preprocessing pipeline did to one image."""

    cropped: bool
    warn_degenerate: bool
    box: CropBox | None


@dataclass(frozen=True)
class PreprocessSettings:
    threshold: float = 0.04        # binarization, fraction of full scale
    minkowski_p: float = 6.0       # Shades of Gray norm order
    target: int = 600              # longest side after resize
    inset: float = 1.0             # crop box shrink factor
    ratio_threshold: float = 2.0   # inside/outside mean intensity ratio


def grayscale(img: np.ndarray) -> np.ndarray:
    """Unweighted channel mean; enough for a near-binary FOV mask."""
    return img.mean(axis=2)


def binarize_fov(img: np.ndarray, threshold: float = 0.04) -> np.ndarray:
    """Boolean mask of pixels whose grayscale exceeds the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return grayscale(img) > threshold


def fit_fov_ellipse(mask: np.ndarray) -> EllipseFit:
    """Fit the ellipse with the same second central moments as the mask.

    Centroid is the center of mass; each semi-axis is twice the standard
    deviation along the corresponding principal direction, which makes a
    solid disc of radius r come out with both semi-axes equal to r.

    Raises DegenerateMask for fewer than 3 set pixels or a collinear set.
    """
    ys, xs = np.nonzero(mask)
    n = xs.size
    if n < 3:
        raise DegenerateMask(f"mask has {n} set pixels, need at least 3")
    cx = xs.mean()
    cy = ys.mean()
    dx = xs - cx
    dy = ys - cy
    cov = np.array([[dx @ dx, dx @ dy], [dx @ dy, dy @ dy]]) / n
    evals, evecs = np.linalg.eigh(cov)  # ascending
    if evals[0] < 1e-9:
        raise DegenerateMask("set pixels are collinear")
    semi_minor = 2.0 * math.sqrt(evals[0])
    semi_major = 2.0 * math.sqrt(evals[1])
    vx, vy = evecs[0, 1], evecs[1, 1]
    theta = math.atan2(vy, vx)
    if theta > math.pi / 2:
        theta -= math.pi
    elif theta <= -math.pi / 2:
        theta += math.pi
    return EllipseFit(cx, cy, semi_major, semi_minor, theta)


def derive_crop_box(fit: EllipseFit, img_dims: tuple[int, int], inset: float = 1.0) -> CropBox:
    """Axis-aligned box: centroid +- inset * (ellipse projection), clamped to bounds.

    img_dims is (height, width). Clamping guarantees a valid, nonempty box.
    """
    if not 0.0 < inset <= 1.0:
        raise ValueError(f"inset must be in (0, 1], got {inset}")
    h, w = img_dims
    c, s = math.cos(fit.orientation), math.sin(fit.orientation)
    half_x = inset * math.hypot(fit.semi_major * c, fit.semi_minor * s)
    half_y = inset * math.hypot(fit.semi_major * s, fit.semi_minor * c)
    x0 = max(0, _round_half_up(fit.centroid_x - half_x))
    x1 = min(w, _round_half_up(fit.centroid_x + half_x))
    y0 = max(0, _round_half_up(fit.centroid_y - half_y))
    y1 = min(h, _round_half_up(fit.centroid_y + half_y))
    # A sub-pixel ellipse can round to an empty box; fall back to one pixel.
    if x1 <= x0:
        x0 = min(max(0, _round_half_up(fit.centroid_x)), w - 1)
        x1 = x0 + 1
    if y1 <= y0:
        y0 = min(max(0, _round_half_up(fit.centroid_y)), h - 1)
        y1 = y0 + 1
    return CropBox(x0, y0, x1, y1)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def should_crop(img: np.ndarray, box: CropBox, ratio_threshold: float = 2.0,
                eps: float = 1e-3) -> bool:
    """Crop heuristic: mean intensity inside the box vs outside.

    True iff inside_mean >= ratio_threshold * max(outside_mean, eps). A box
    covering the whole image has no outside and never triggers a crop.
    """
    h, w = img.shape[:2]
    if box.x0 <= 0 and box.y0 <= 0 and box.x1 >= w and box.y1 >= h:
        return False
    g = grayscale(img)
    inside = g[box.y0:box.y1, box.x0:box.x1]
    n_out = g.size - inside.size
    outside_mean = (g.sum() - inside.sum()) / n_out
    return bool(inside.mean() >= ratio_threshold * max(outside_mean, eps))


def shades_of_gray(img: np.ndarray, p: float = 6.0) -> np.ndarray:
    """Shades of Gray color constancy with Minkowski norm p.

    Per channel c, the illuminant estimate is e_c = mean(I_c^p)^(1/p); gains
    mean(e)/e_c equalize the channels while preserving overall brightness.
    p=1 is gray-world, p -> inf approaches white-patch. Output clipped to [0, 1].
    """
    if p < 1.0:
        raise ValueError(f"Minkowski order must be >= 1, got {p}")
    e = np.mean(img ** p, axis=(0, 1)) ** (1.0 / p)
    if np.any(e == 0.0):
        raise ZeroChannel(f"channel illuminant estimates {e} contain zero")
    gains = e.mean() / e
    return np.clip(img * gains, 0.0, 1.0)


def resize_longest(img: np.ndarray, target: int = 600) -> np.ndarray:
    """Bilinear downscale so the longer side equals target; never upsamples."""
    if target < 1:
        raise ValueError(f"target must be >= 1, got {target}")
    h, w = img.shape[:2]
    longer = max(h, w)
    if longer <= target:
        return img
    if h >= w:
        nh = target
        nw = max(1, _round_half_up(w * target / h))
    else:
        nw = target
        nh = max(1, _round_half_up(h * target / w))
    out = cv2.resize(img.astype(np.float32), (nw, nh), interpolation=cv2.INTER_LINEAR)
    return np.clip(out.astype(np.float64), 0.0, 1.0)


def crop(img: np.ndarray, box: CropBox) -> np.ndarray:
    return img[box.y0:box.y1, box.x0:box.x1]


def preprocess_image(img: np.ndarray, settings: PreprocessSettings | None = None
                     ) -> tuple[np.ndarray, CropReport]:
    """Full chain: binarize -> fit -> box -> conditional crop -> Shades of Gray -> resize.

    A degenerate mask (e.g. an all-black image) skips the crop and sets the
    warning flag instead of failing; so does an all-zero channel at the
    color-constancy step.
    """
    settings = settings or PreprocessSettings()
    box = None
    cropped = False
    warn = False
    try:
        mask = binarize_fov(img, settings.threshold)
        fit = fit_fov_ellipse(mask)
        box = derive_crop_box(fit, img.shape[:2], settings.inset)
        if should_crop(img, box, settings.ratio_threshold):
            img = crop(img, box)
            cropped = True
    except DegenerateMask as exc:
        log.warning("degenerate FOV mask, not cropping: %s", exc)
        warn = True
    try:
        img = shades_of_gray(img, settings.minkowski_p)
    except ZeroChannel as exc:
        log.warning("skipping color constancy: %s", exc)
        warn = True
    img = resize_longest(img, settings.target)
    return img, CropReport(cropped=cropped, warn_degenerate=warn, box=box)


# ---------------------------------------------------------------------------
# File I/O and the batch driver.

def load_image(path) -> np.ndarray:
    """Read PNG/JPEG as float64 RGB in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, img: np.ndarray) -> None:
    """Write lossless PNG (atomic replace)."""
    data = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with atomic_write(path, "wb") as fh:
        Image.fromarray(data, mode="RGB").save(fh, format="PNG")


def _process_one(args) -> tuple[str, CropReport]:
    rel, in_path, out_path, settings = args
    out, report = preprocess_image(load_image(in_path), settings)
    save_image(out_path, out)
    return rel, report


def preprocess_tree(input_dir, output_dir, settings: PreprocessSettings | None = None,
                    jobs: int = 1) -> list[tuple[str, CropReport]]:
    """Preprocess every image under input_dir into a mirror tree of PNGs.

    Images are independent, so the pool width only affects wall time; the
    returned report rows are sorted by relative path either way.
    """
    settings = settings or PreprocessSettings()
    input_dir = Path(input_dir)
    output_dir = Path(output_dir)
    tasks = []
    for p in sorted(input_dir.rglob("*")):
        if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file():
            rel = p.relative_to(input_dir).with_suffix(".png")
            tasks.append((str(rel), p, output_dir / rel, settings))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_process_one, tasks))
    else:
        rows = [_process_one(t) for t in tasks]
    rows.sort(key=lambda r: r[0])
    return rows


def write_crop_reports(path, rows: list[tuple[str, CropReport]]) -> None:
    """One CSV row per image: image,cropped,warn_degenerate,x0,y0,x1,y1."""
    with atomic_write(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "cropped", "warn_degenerate", "x0", "y0", "x1", "y1"])
        for rel, rep in rows:
            box = ["", "", "", ""] if rep.box is None else \
                [rep.box.x0, rep.box.y0, rep.box.x1, rep.box.y1]
            writer.writerow([rel, _bool(rep.cropped), _bool(rep.warn_degenerate), *box])


def _bool(v: bool) -> str:
    return "true" if v else "false"
