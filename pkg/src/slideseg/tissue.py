"""Tissue detection on slide thumbnails.

Stained tissue is darker than the glass background in brightfield slides, so
the luma channel split by an Otsu threshold separates the two; the lower
(darker) class is tissue. Speckle below a minimum component size is dropped.
All downstream tiling is gated by the resulting mask, which is what keeps
mostly-empty slides cheap to process.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .pyramid import SlidePyramid

DEFAULT_THUMB_MAX_DIM = 2048
DEFAULT_MIN_COMPONENT_PX = 64

# 8-connectivity for tissue blobs.
_STRUCT8 = np.ones((3, 3), dtype=bool)


def luma(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luma, rounded to the nearest integer, uint8."""
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.rint(y).astype(np.uint8)


def otsu_threshold(histogram) -> tuple[int, bool]:
    """Threshold index t in 0..255 maximizing between-class variance of the
    split [0..t] vs [t+1..255].

    Candidates with an empty lower class are excluded; ties break toward the
    smallest t. Returns (t, degenerate) where degenerate means the maximum
    variance is zero (all mass in a single bin), in which case t is that bin.
    """
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (256,):
        raise ValidationError("histogram must have 256 bins")
    total = hist.sum()
    if total <= 0:
        raise ValidationError("histogram is empty")
    bins = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    w1 = total - w0
    csum = np.cumsum(hist * bins)
    grand = csum[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = csum / w0
        mu1 = (grand - csum) / w1
        variance = w0 * w1 * (mu0 - mu1) ** 2
    variance[~np.isfinite(variance)] = 0.0
    variance[w0 == 0] = -1.0  # exclude empty lower class
    t = int(np.argmax(variance))  # argmax takes the first (smallest) maximum
    return t, bool(variance[t] <= 0.0)


@dataclass
class TissueMask:
    """Binary tissue raster at one pyramid level."""

    level: int
    mask: np.ndarray  # bool, dims of that level
    degenerate: bool = False
    warnings: list[str] = field(default_factory=list)

    @property
    def scale_to_level0(self) -> int:
        return 1 << self.level

    @property
    def tissue_pixel_count(self) -> int:
        return int(np.count_nonzero(self.mask))


def detect_tissue(pyramid: SlidePyramid,
                  thumb_max_dim: int = DEFAULT_THUMB_MAX_DIM,
                  min_component_px: int = DEFAULT_MIN_COMPONENT_PX) -> TissueMask:
    """Threshold the thumbnail into a tissue mask.

    Pixels with luma <= the Otsu index (the darker class) are tissue;
    8-connected components smaller than `min_component_px` are removed.
    A uniform slide yields an empty mask flagged degenerate, not an error.
    Depends only on the thumbnail, so the result is independent of tile size.
    """
    thumb = pyramid.thumbnail(thumb_max_dim)
    level = pyramid.thumbnail_level(thumb_max_dim)
    y = luma(thumb)
    hist = np.bincount(y.ravel(), minlength=256)
    t, degenerate = otsu_threshold(hist)
    if degenerate:
        mask = np.zeros(y.shape, dtype=bool)
        return TissueMask(level=level, mask=mask, degenerate=True,
                          warnings=["uniform slide: no tissue/background split"])
    mask = y <= t
    if min_component_px > 1 and mask.any():
        labels, n = ndimage.label(mask, structure=_STRUCT8)
        if n:
            sizes = np.bincount(labels.ravel())
            sizes[0] = 0
            keep = sizes >= min_component_px
            mask = keep[labels]
    return TissueMask(level=level, mask=mask)


def full_tissue_mask(pyramid: SlidePyramid,
                     thumb_max_dim: int = DEFAULT_THUMB_MAX_DIM) -> TissueMask:
    """All-tissue mask at thumbnail scale; used to force full-grid processing."""
    level = pyramid.thumbnail_level(thumb_max_dim)
    from .pyramid import level_dimensions

    w, h = level_dimensions(pyramid.width0, pyramid.height0, level)
    return TissueMask(level=level, mask=np.ones((h, w), dtype=bool))


def tissue_bounds(tissue: TissueMask,
                  slide_dims: tuple[int, int] | None = None) -> list[tuple[int, int, int, int]]:
    """Level-0 bounding boxes (x0, y0, x1, y1), inclusive-exclusive, one per
    8-connected component, clamped to the slide bounds when given."""
    if not tissue.mask.any():
        return []
    labels, n = ndimage.label(tissue.mask, structure=_STRUCT8)
    objects = ndimage.find_objects(labels)
    s = tissue.scale_to_level0
    boxes = []
    for sl in objects:
        if sl is None:
            continue
        ys, xs = sl
        x0, y0 = xs.start * s, ys.start * s
        x1, y1 = xs.stop * s, ys.stop * s
        if slide_dims is not None:
            x1 = min(x1, slide_dims[0])
            y1 = min(y1, slide_dims[1])
        boxes.append((x0, y0, x1, y1))
    return boxes
