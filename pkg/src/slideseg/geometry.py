"""Polygon raster math shared by contour extraction, annotation rasterization,
and the synthetic slide generator.

Conventions used everywhere in this package:

- Polygons live in level-0 pixel-corner coordinates: the corner lattice of the
  pixel grid, so the pixel at column x, row y occupies the square
  [x, x+1) x [y, y+1).
- A ring is an (N, 2) float array of (x, y) vertices, implicitly closed
  (the last vertex connects back to the first).
- Positive shoelace area = counter-clockwise = exterior; negative = hole.
- A pixel belongs to a polygon iff its center (x+0.5, y+0.5) is inside by the
  even-odd rule. Centers never sit on edges of integer-corner rings, which is
  what makes mask -> contour -> mask round trips exact.
"""

from __future__ import annotations

import math

import numpy as np


def as_ring(vertices) -> np.ndarray:
    """Coerce a vertex list to an (N, 2) float64 ring array."""
    ring = np.asarray(vertices, dtype=np.float64)
    if ring.ndim != 2 or ring.shape[1] != 2:
        raise ValueError(f"ring must be (N, 2), got shape {ring.shape}")
    return ring


def ring_area(ring: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise rings."""
    x = ring[:, 0]
    y = ring[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def canonical_ring(ring: np.ndarray) -> np.ndarray:
    """Rotate a ring so the smallest (y, x) vertex comes first.

    Orientation is preserved. Gives deterministic, comparison-friendly output
    regardless of where a trace or simplification happened to start.
    """
    order = np.lexsort((ring[:, 0], ring[:, 1]))
    start = int(order[0])
    return np.roll(ring, -start, axis=0)


def rasterize_rings(rings, width: int, height: int,
                    origin: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    """Even-odd fill of one or more rings into a boolean (height, width) mask.

    `origin` is the level-0 (x, y) of the window's top-left pixel; rings are
    given in absolute coordinates. Holes need no special treatment: a point
    inside both an exterior and one of its holes has even parity and stays
    outside.

    Pixel centers sit at half-integers, so integer-corner rings are filled
    exactly: a vertical edge at x = k toggles parity from pixel column k on.
    """
    mask = np.zeros((height, width), dtype=np.uint8)
    if width <= 0 or height <= 0:
        return mask.astype(bool)
    ox, oy = origin
    # One extra parity column absorbs crossings right of the window.
    toggles = np.zeros((height, width + 1), dtype=np.uint8)
    any_edge = False
    for ring in rings:
        ring = as_ring(ring)
        if len(ring) < 3:
            continue
        x1 = ring[:, 0] - ox
        y1 = ring[:, 1] - oy
        x2 = np.roll(x1, -1)
        y2 = np.roll(y1, -1)
        keep = y1 != y2  # horizontal edges never cross a scanline
        if not np.any(keep):
            continue
        x1, y1, x2, y2 = x1[keep], y1[keep], x2[keep], y2[keep]
        ylo = np.minimum(y1, y2)
        yhi = np.maximum(y1, y2)
        # Rows whose center (r + 0.5) satisfies ylo <= center < yhi.
        r0 = np.maximum(np.ceil(ylo - 0.5).astype(np.int64), 0)
        r1 = np.minimum(np.ceil(yhi - 0.5).astype(np.int64), height)
        for i in range(len(x1)):
            if r0[i] >= r1[i]:
                continue
            rows = np.arange(r0[i], r1[i])
            t = (rows + 0.5 - y1[i]) / (y2[i] - y1[i])
            xc = x1[i] + t * (x2[i] - x1[i])
            # First pixel column whose center lies strictly right of xc.
            cols = np.ceil(xc - 0.5).astype(np.int64)
            np.clip(cols, 0, width, out=cols)
            np.add.at(toggles, (rows, cols), 1)
            any_edge = True
    if not any_edge:
        return mask.astype(bool)
    # uint8 cumsum wraps mod 256 (even), which preserves parity.
    parity = np.cumsum(toggles[:, :width], axis=1, dtype=np.uint8)
    return (parity & 1).astype(bool)


def point_in_ring(ring: np.ndarray, x: float, y: float) -> bool:
    """Even-odd test with the same half-open crossing rule as the rasterizer."""
    ring = as_ring(ring)
    x1 = ring[:, 0]
    y1 = ring[:, 1]
    x2 = np.roll(x1, -1)
    y2 = np.roll(y1, -1)
    crosses = ((y1 <= y) & (y < y2)) | ((y2 <= y) & (y < y1))
    if not np.any(crosses):
        return False
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (y - y1) / (y2 - y1)
        xc = x1 + t * (x2 - x1)
    return bool(np.sum(crosses & (xc > x)) % 2 == 1)


def _orient(ax, ay, bx, by, cx, cy) -> int:
    v = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if v > 0:
        return 1
    if v < 0:
        return -1
    return 0


def _on_segment(ax, ay, bx, by, px, py) -> bool:
    return (min(ax, bx) <= px <= max(ax, bx)) and (min(ay, by) <= py <= max(ay, by))


def segments_intersect(a1, a2, b1, b2) -> bool:
    """True if closed segments a1-a2 and b1-b2 share any point."""
    o1 = _orient(*a1, *a2, *b1)
    o2 = _orient(*a1, *a2, *b2)
    o3 = _orient(*b1, *b2, *a1)
    o4 = _orient(*b1, *b2, *a2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and _on_segment(*a1, *a2, *b1):
        return True
    if o2 == 0 and _on_segment(*a1, *a2, *b2):
        return True
    if o3 == 0 and _on_segment(*b1, *b2, *a1):
        return True
    if o4 == 0 and _on_segment(*b1, *b2, *a2):
        return True
    return False


def ring_self_intersects(ring: np.ndarray) -> bool:
    """True if any two non-adjacent edges of the closed ring touch.

    O(n^2); rings from interactive editing are small.
    """
    ring = as_ring(ring)
    n = len(ring)
    if n < 3:
        return True
    pts = [(float(p[0]), float(p[1])) for p in ring]
    for i in range(n):
        a1 = pts[i]
        a2 = pts[(i + 1) % n]
        for j in range(i + 1, n):
            # Skip the edge itself and the two adjacent edges.
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if segments_intersect(a1, a2, pts[j], pts[(j + 1) % n]):
                return True
    return False


def point_segment_distance(px, py, ax, ay, bx, by) -> float:
    """Euclidean distance from point p to segment a-b."""
    dx = bx - ax
    dy = by - ay
    denom = dx * dx + dy * dy
    if denom == 0.0:
        return math.hypot(px - ax, py - ay)
    t = ((px - ax) * dx + (py - ay) * dy) / denom
    t = min(1.0, max(0.0, t))
    return math.hypot(px - (ax + t * dx), py - (ay + t * dy))
