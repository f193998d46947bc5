"""Stitch per-tile label masks into slide space and trace class regions into
polygon contours with holes.

Contours live on the pixel-corner lattice: the pixel at (x, y) occupies
[x, x+1) x [y, y+1), vertices are integer corners, and edges are axis
aligned. This is the one convention under which filling the polygons back in
(pixel centers inside the exterior and outside every hole) reproduces the
source pixels exactly, which the tests lean on hard.

Orientation: exterior rings have positive shoelace area (counter-clockwise),
hole rings negative (clockwise). Regions are 8-connected; holes are
4-connected background enclosed by a region.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .backends import LabelMask
from .errors import ValidationError
from .geometry import canonical_ring, ring_area

log = logging.getLogger(__name__)

DEFAULT_MIN_AREA_PX = 400
DEFAULT_EPSILON_PX = 2.0

_STRUCT8 = np.ones((3, 3), dtype=bool)


@dataclass
class StitchedRegion:
    """Slide-space window of merged tile predictions."""

    origin: tuple[int, int]  # level-0 (x, y) of the window's top-left pixel
    labels: np.ndarray  # (h, w) uint8
    classes: int
    votes: np.ndarray | None = None  # winning confidence; None = uniform 1.0

    @property
    def w(self) -> int:
        return self.labels.shape[1]

    @property
    def h(self) -> int:
        return self.labels.shape[0]


@dataclass
class Contour:
    """One traced region of one class: exterior ring plus hole rings, in
    level-0 pixel-corner coordinates."""

    class_id: int
    exterior: np.ndarray  # (N, 2) float, CCW (positive shoelace)
    holes: list[np.ndarray] = field(default_factory=list)  # CW rings
    area_px: int = 0  # enclosed pixel count of the source component


def stitch(tiles: list[tuple[tuple[int, int], LabelMask]],
           classes: int | None = None) -> StitchedRegion:
    """Merge per-tile masks over the union of their footprints.

    Per pixel, the highest confidence wins (a mask without confidence counts
    as 1.0 everywhere); ties prefer non-background over background, then the
    lowest class id. The outcome is independent of tile order.
    """
    if not tiles:
        raise ValidationError("stitch needs at least one tile")
    if classes is None:
        classes = tiles[0][1].classes
    for _, mask in tiles:
        if mask.classes != classes:
            raise ValidationError("tiles disagree on class count")
    x0 = min(o[0] for o, _ in tiles)
    y0 = min(o[1] for o, _ in tiles)
    x1 = max(o[0] + m.w for o, m in tiles)
    y1 = max(o[1] + m.h for o, m in tiles)
    w, h = x1 - x0, y1 - y0

    if not any(m.confidence is not None for _, m in tiles):
        # All confidences are 1.0: the rule reduces to "lowest non-background
        # class id wins, else background". Track the minimum over a sentinel.
        best = np.full((h, w), 255, dtype=np.uint8)
        for (tx, ty), mask in tiles:
            sy, sx = ty - y0, tx - x0
            window = best[sy:sy + mask.h, sx:sx + mask.w]
            np.minimum(window, np.where(mask.labels > 0, mask.labels, 255),
                       out=window)
        labels = np.where(best == 255, 0, best).astype(np.uint8)
        return StitchedRegion(origin=(x0, y0), labels=labels, classes=classes,
                              votes=None)

    labels = np.zeros((h, w), dtype=np.uint8)
    best_conf = np.full((h, w), -1.0, dtype=np.float32)
    best_nonbg = np.zeros((h, w), dtype=np.uint8)
    for (tx, ty), mask in tiles:
        sy, sx = ty - y0, tx - x0
        sl = (slice(sy, sy + mask.h), slice(sx, sx + mask.w))
        conf = mask.confidence if mask.confidence is not None else \
            np.ones(mask.labels.shape, dtype=np.float32)
        nonbg = (mask.labels > 0).astype(np.uint8)
        bc, bn, bl = best_conf[sl], best_nonbg[sl], labels[sl]
        better = (conf > bc) | \
                 ((conf == bc) & (nonbg > bn)) | \
                 ((conf == bc) & (nonbg == bn) & (nonbg == 1) & (mask.labels < bl))
        bc[better] = conf[better]
        bn[better] = nonbg[better]
        bl[better] = mask.labels[better]
    votes = np.where(best_conf < 0, 0.0, best_conf).astype(np.float32)
    return StitchedRegion(origin=(x0, y0), labels=labels, classes=classes,
                          votes=votes)


# ---------------------------------------------------------------------------
# Boundary tracing

# Directed boundary edges, one per exposed pixel side, oriented so the pixel
# is kept on the walker's left (mathematical convention on (x, y)). Exterior
# loops then come out with positive shoelace area and holes negative.
#
#   side   exposed when        edge (corner -> corner)
#   top    (x, y-1) is bg      (x,   y)   -> (x+1, y)
#   right  (x+1, y) is bg      (x+1, y)   -> (x+1, y+1)
#   bottom (x, y+1) is bg      (x+1, y+1) -> (x,   y+1)
#   left   (x-1, y) is bg      (x,   y+1) -> (x,   y)

_DIR_RIGHT, _DIR_DOWN, _DIR_LEFT, _DIR_UP = 0, 1, 2, 3
_STEP = {_DIR_RIGHT: (1, 0), _DIR_DOWN: (0, 1), _DIR_LEFT: (-1, 0), _DIR_UP: (0, -1)}
# A saddle corner (diagonal foreground, so two incoming and two outgoing
# edges) pairs each incoming direction with the turn below. This crosses the
# walk over to the diagonal pixel, merging 8-connected foreground into one
# pinched ring, while 4-connected background on the other diagonal stays on
# separate hole rings. (Derived by enumerating both saddle configurations.)
_SADDLE_TURN = {_DIR_DOWN: _DIR_RIGHT, _DIR_RIGHT: _DIR_UP,
                _DIR_UP: _DIR_LEFT, _DIR_LEFT: _DIR_DOWN}


def _boundary_edges(mask: np.ndarray):
    """Directed boundary edges of a binary mask as a dict
    (corner -> {direction: end_corner})."""
    padded = np.zeros((mask.shape[0] + 2, mask.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = mask
    fg = padded[1:-1, 1:-1]
    edges: dict[tuple[int, int], dict[int, tuple[int, int]]] = {}

    def add(ys, xs, direction):
        dx, dy = _STEP[direction]
        for y, x in zip(ys.tolist(), xs.tolist()):
            start = (x, y) if direction == _DIR_RIGHT else \
                    (x + 1, y) if direction == _DIR_DOWN else \
                    (x + 1, y + 1) if direction == _DIR_LEFT else \
                    (x, y + 1)
            edges.setdefault(start, {})[direction] = (start[0] + dx, start[1] + dy)

    top = fg & ~padded[:-2, 1:-1]
    right = fg & ~padded[1:-1, 2:]
    bottom = fg & ~padded[2:, 1:-1]
    left = fg & ~padded[1:-1, :-2]
    ys, xs = np.nonzero(top)
    add(ys, xs, _DIR_RIGHT)
    ys, xs = np.nonzero(right)
    add(ys, xs, _DIR_DOWN)
    ys, xs = np.nonzero(bottom)
    add(ys, xs, _DIR_LEFT)
    ys, xs = np.nonzero(left)
    add(ys, xs, _DIR_UP)
    return edges


def _trace_rings(mask: np.ndarray) -> list[np.ndarray]:
    """All boundary rings of a binary mask, collinear runs merged, each ring
    canonicalized to start at its smallest (y, x) corner."""
    edges = _boundary_edges(mask)
    # The successor of a directed edge depends on the corner's original
    # out-degree, not on what an earlier walk already consumed, so keep the
    # pristine direction sets around for the whole trace.
    out_dirs = {corner: frozenset(dirs) for corner, dirs in edges.items()}
    rings = []
    # Deterministic walk order: sorted start corners, direction index order.
    for start in sorted(edges):
        for d0 in range(4):
            if d0 not in edges.get(start, ()):
                continue
            ring_pts = []
            corner, d = start, d0
            while True:
                end = edges[corner].pop(d)
                if not edges[corner]:
                    del edges[corner]
                ring_pts.append(corner)
                dirs = out_dirs[end]
                d = _SADDLE_TURN[d] if len(dirs) > 1 else next(iter(dirs))
                corner = end
                if corner == start and d == d0:
                    break
            rings.append(_merge_collinear(ring_pts))
    return rings


def _merge_collinear(points: list[tuple[int, int]]) -> np.ndarray:
    """Keep only direction-change vertices of a closed unit-step ring."""
    n = len(points)
    keep = []
    for i in range(n):
        px, py = points[i - 1]
        cx, cy = points[i]
        nx, ny = points[(i + 1) % n]
        if (cx - px) * (ny - cy) != (cy - py) * (nx - cx):
            keep.append((cx, cy))
    return canonical_ring(np.asarray(keep, dtype=np.float64))


def extract_contours(region: StitchedRegion, class_id: int,
                     min_area_px: int = DEFAULT_MIN_AREA_PX) -> list[Contour]:
    """Trace every 8-connected component of `class_id` into a Contour.

    Components smaller than `min_area_px` are dropped. Rasterizing the result
    (pixel centers inside the exterior, outside holes) reproduces the
    component pixels exactly.
    """
    if class_id < 1:
        raise ValidationError("class_id must be >= 1 (0 is background)")
    binary = region.labels == class_id
    if not binary.any():
        return []
    comp_labels, n = ndimage.label(binary, structure=_STRUCT8)
    objects = ndimage.find_objects(comp_labels)
    ox, oy = region.origin
    out: list[Contour] = []
    for idx, sl in enumerate(objects, start=1):
        if sl is None:
            continue
        ys, xs = sl
        comp = comp_labels[sl] == idx
        area = int(np.count_nonzero(comp))
        if area < min_area_px:
            continue
        rings = _trace_rings(comp)
        exterior = None
        holes = []
        for ring in rings:
            # Shift from component-local to level-0 corner coordinates.
            ring = ring + np.array([ox + xs.start, oy + ys.start], dtype=np.float64)
            if ring_area(ring) > 0:
                exterior = ring
            else:
                holes.append(ring)
        if exterior is None:  # cannot happen for a nonempty component
            continue
        out.append(Contour(class_id=class_id, exterior=exterior,
                           holes=holes, area_px=area))
    out.sort(key=lambda c: (c.exterior[0, 1], c.exterior[0, 0]))
    return out


# ---------------------------------------------------------------------------
# Simplification


def _farthest_pair(ring: np.ndarray) -> tuple[int, int]:
    """Indices of the two farthest-apart vertices (smallest index pair wins
    ties). Uses the convex hull to keep the pairwise search small."""
    n = len(ring)
    if n <= 3:
        return 0, min(1, n - 1)
    try:
        hull_idx = np.sort(np.asarray(ConvexHull(ring).vertices))
    except QhullError:
        hull_idx = np.arange(n)  # degenerate (e.g. collinear) ring
    pts = ring[hull_idx]
    d2 = np.sum((pts[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    flat = int(np.argmax(d2))
    i, j = divmod(flat, len(pts))
    a, b = int(hull_idx[i]), int(hull_idx[j])
    return (a, b) if a < b else (b, a)


def _seg_distances(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from each point to the segment a-b, vectorized."""
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.hypot(pts[:, 0] - a[0], pts[:, 1] - a[1])
    t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(pts[:, 0] - proj[:, 0], pts[:, 1] - proj[:, 1])


def _dp_chain(chain: np.ndarray, epsilon: float) -> list[int]:
    """Douglas-Peucker on an open chain; returns kept indices (ends always)."""
    n = len(chain)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        d = _seg_distances(chain[lo + 1:hi], chain[lo], chain[hi])
        best_i = lo + 1 + int(np.argmax(d))
        if float(d[best_i - lo - 1]) > epsilon:
            keep[best_i] = True
            stack.append((lo, best_i))
            stack.append((best_i, hi))
    return [i for i in range(n) if keep[i]]


def simplify_ring(ring: np.ndarray, epsilon: float) -> np.ndarray | None:
    """Douglas-Peucker on a closed ring, anchored at the two farthest-apart
    vertices. Returns None when the ring degenerates below 3 distinct
    vertices. epsilon = 0 removes exactly-collinear vertices only."""
    if epsilon < 0:
        raise ValidationError("epsilon must be >= 0")
    n = len(ring)
    if n < 3:
        return None
    a, b = _farthest_pair(ring)
    rolled = np.roll(ring, -a, axis=0)
    split = b - a
    chain1 = rolled[:split + 1]
    chain2 = np.concatenate([rolled[split:], rolled[:1]], axis=0)
    kept1 = _dp_chain(chain1, epsilon)
    kept2 = _dp_chain(chain2, epsilon)
    pts = [chain1[i] for i in kept1[:-1]] + [chain2[i] for i in kept2[:-1]]
    result = np.asarray(pts, dtype=np.float64)
    if len(np.unique(result, axis=0)) < 3:
        return None
    return canonical_ring(result)


def simplify(contour: Contour, epsilon: float) -> Contour | None:
    """Simplify every ring of a contour. A degenerated hole is dropped with a
    log line; a degenerated exterior drops the whole contour (returns None).
    area_px keeps the source component's pixel count."""
    exterior = simplify_ring(contour.exterior, epsilon)
    if exterior is None:
        log.warning("contour of class %d degenerated at epsilon=%g; dropped",
                    contour.class_id, epsilon)
        return None
    holes = []
    for hole in contour.holes:
        simplified = simplify_ring(hole, epsilon)
        if simplified is None:
            log.warning("hole of class-%d contour degenerated at epsilon=%g; dropped",
                        contour.class_id, epsilon)
            continue
        holes.append(simplified)
    return Contour(class_id=contour.class_id, exterior=exterior, holes=holes,
                   area_px=contour.area_px)
