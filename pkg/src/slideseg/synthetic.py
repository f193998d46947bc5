"""Seeded synthetic slides: dark magenta blobs on a white background, plus
the exact ground-truth polygons they were painted from.

Layout is sampled in normalized [0, 1] coordinates, so one seed produces the
same relative geometry (and tissue fraction) at every slide size - which is
what makes timing-vs-size scaling runs comparable. The image is painted by
rasterizing the truth polygons themselves, so the truth is exact by
construction, and blob colors keep a safe margin inside the builtin
segmenter's default rule (luma < 200 and R - B > 30): base (170, 45, 105),
per-blob jitter +-10, per-pixel jitter +-4 leaves luma <= 104 and
R - B >= 37 everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .annotations import AnnotationDocument, AnnotationLayer, PolygonElement
from .errors import ValidationError
from .geometry import rasterize_rings

BASE_COLOR = (170, 45, 105)
BLOB_JITTER = 10
PIXEL_JITTER = 4
MIN_RADIUS_FRAC = 1 / 24
MAX_RADIUS_FRAC = 1 / 12
_GAP_FRAC = 0.005
_MAX_ATTEMPTS = 20000


@dataclass(frozen=True)
class _Blob:
    cx: float
    cy: float
    rx: float
    ry: float
    theta: float

    @property
    def bound(self) -> float:
        return max(self.rx, self.ry)


def _place_blobs(rng: np.random.Generator, count: int) -> list[_Blob]:
    """Rejection-sample non-overlapping ellipses in normalized coordinates.
    Overlap is excluded via bounding circles plus a small gap, which also
    guarantees the rasterized blobs stay 4/8-disconnected at any size."""
    blobs: list[_Blob] = []
    attempts = 0
    while len(blobs) < count:
        attempts += 1
        if attempts > _MAX_ATTEMPTS:
            raise ValidationError(
                f"could not place {count} non-overlapping blobs")
        rx, ry = rng.uniform(MIN_RADIUS_FRAC, MAX_RADIUS_FRAC, size=2)
        bound = max(rx, ry)
        margin = bound + _GAP_FRAC
        cx, cy = rng.uniform(margin, 1.0 - margin, size=2)
        theta = rng.uniform(0.0, math.pi)
        cand = _Blob(cx, cy, rx, ry, theta)
        if all(math.hypot(b.cx - cx, b.cy - cy) > b.bound + bound + _GAP_FRAC
               for b in blobs):
            blobs.append(cand)
    return blobs


def _blob_ring(blob: _Blob, size: int) -> np.ndarray:
    """Ellipse polygon in level-0 coordinates, dense enough that the chord
    sagitta stays under half a pixel."""
    r_px = blob.bound * size
    n = max(32, int(math.ceil(math.pi * math.sqrt(max(r_px, 1.0)))))
    phi = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    ex = blob.rx * np.cos(phi)
    ey = blob.ry * np.sin(phi)
    cos_t, sin_t = math.cos(blob.theta), math.sin(blob.theta)
    x = (blob.cx + ex * cos_t - ey * sin_t) * size
    y = (blob.cy + ex * sin_t + ey * cos_t) * size
    return np.stack([x, y], axis=1)


def make_synthetic(size: int, blobs: int, seed: int,
                   slide_id: str | None = None
                   ) -> tuple[np.ndarray, AnnotationDocument]:
    """Generate (RGB image, ground-truth document) for one synthetic slide."""
    if size < 64:
        raise ValidationError("size must be >= 64")
    if blobs < 1:
        raise ValidationError("blobs must be >= 1")
    if slide_id is None:
        slide_id = f"synthetic_{size}_{seed}"
    rng = np.random.default_rng(seed)
    placed = _place_blobs(rng, blobs)

    image = np.full((size, size, 3), 255, dtype=np.uint8)
    elements = []
    for k, blob in enumerate(placed, start=1):
        element = PolygonElement(f"t-{k}", [tuple(p) for p in _blob_ring(blob, size)],
                                 source="imported")
        elements.append(element)
        ring = np.asarray(element.points, dtype=np.float64)
        bx = max(int(math.floor(ring[:, 0].min())) - 1, 0)
        by = max(int(math.floor(ring[:, 1].min())) - 1, 0)
        bx1 = min(int(math.ceil(ring[:, 0].max())) + 1, size)
        by1 = min(int(math.ceil(ring[:, 1].max())) + 1, size)
        bw, bh = bx1 - bx, by1 - by
        inside = rasterize_rings([ring], bw, bh, origin=(bx, by))
        color = np.array(BASE_COLOR, dtype=np.int64) + \
            rng.integers(-BLOB_JITTER, BLOB_JITTER + 1, size=3)
        block = color[None, None, :] + \
            rng.integers(-PIXEL_JITTER, PIXEL_JITTER + 1, size=(bh, bw, 3))
        window = image[by:by1, bx:bx1]
        window[inside] = block.astype(np.uint8)[inside]

    layer = AnnotationLayer(name="tissue", class_id=1, line_color=(0, 255, 0),
                            elements=elements)
    doc = AnnotationDocument(slide_id=slide_id, revision=0, layers=[layer])
    return image, doc
