"""Enumerate the level-0 patch windows that intersect tissue.

Origins advance by stride = tile_size - overlap within each tissue bounding
box; a tile that would cross the slide edge is clamped so it ends at the
edge. Tiles whose footprint contains no tissue pixel are dropped. The plan
is a pure function of its inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .tissue import TissueMask

DEFAULT_OVERLAP = 64

Box = tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive-exclusive


def merge_boxes(boxes: list[Box], gap: int = 0) -> list[Box]:
    """Merge boxes that overlap (or come within `gap` pixels) into their
    bounding unions, repeating until all are disjoint. Output is sorted."""
    boxes = sorted(boxes)
    merged = True
    while merged:
        merged = False
        out: list[Box] = []
        for box in boxes:
            for i, other in enumerate(out):
                if (box[0] < other[2] + gap and other[0] < box[2] + gap and
                        box[1] < other[3] + gap and other[1] < box[3] + gap):
                    out[i] = (min(box[0], other[0]), min(box[1], other[1]),
                              max(box[2], other[2]), max(box[3], other[3]))
                    merged = True
                    break
            else:
                out.append(box)
        boxes = sorted(out)
    return boxes


@dataclass
class TilePlan:
    slide_id: str
    tile_size: int
    overlap: int
    tiles: list[tuple[int, int]]  # level-0 origins, row-major by (y, x)
    analyzed_pixels: int  # total area of the merged tissue boxes

    def to_jsonl(self) -> str:
        """One tile per line, for debugging."""
        head = json.dumps({"slide_id": self.slide_id, "tile_size": self.tile_size,
                           "overlap": self.overlap,
                           "analyzed_pixels": self.analyzed_pixels})
        lines = [head] + [json.dumps({"x": x, "y": y}) for x, y in self.tiles]
        return "\n".join(lines) + "\n"


class _TissueGate:
    """O(1) any-tissue queries over level-0 windows via a summed-area table."""

    def __init__(self, tissue: TissueMask):
        self.scale = tissue.scale_to_level0
        m = tissue.mask
        self._sat = np.zeros((m.shape[0] + 1, m.shape[1] + 1), dtype=np.int64)
        np.cumsum(np.cumsum(m, axis=0, dtype=np.int64), axis=1,
                  out=self._sat[1:, 1:])

    def any_tissue(self, x0: int, y0: int, x1: int, y1: int) -> bool:
        s = self.scale
        h, w = self._sat.shape[0] - 1, self._sat.shape[1] - 1
        c0 = min(max(x0 // s, 0), w)
        r0 = min(max(y0 // s, 0), h)
        c1 = min(max(-(-x1 // s), 0), w)
        r1 = min(max(-(-y1 // s), 0), h)
        if c0 >= c1 or r0 >= r1:
            return False
        sat = self._sat
        total = (sat[r1, c1] - sat[r0, c1] - sat[r1, c0] + sat[r0, c0])
        return total > 0


def _axis_origins(b0: int, b1: int, stride: int, tile: int, limit: int) -> list[int]:
    """Stride-then-clamp origins along one axis for box span [b0, b1)."""
    origins = []
    pos = b0
    while pos < b1:
        origins.append(min(pos, limit - tile))
        pos += stride
    return origins


def plan_tiles(bounds: list[Box], slide_dims: tuple[int, int], tile_size: int,
               overlap: int, gate: TissueMask, slide_id: str = "") -> TilePlan:
    """Plan tissue-intersecting tiles inside the given level-0 boxes.

    Raises if the slide is smaller than the tile in either dimension
    (padding exists only in training export).
    """
    if not 0 <= overlap < tile_size:
        raise ValidationError("overlap must satisfy 0 <= overlap < tile_size")
    sw, sh = slide_dims
    if sw < tile_size or sh < tile_size:
        raise ValidationError(
            f"slide smaller than tile: {sw}x{sh} vs tile {tile_size}")
    stride = tile_size - overlap
    merged = merge_boxes([_clamp_box(b, sw, sh) for b in bounds])
    tissue_gate = _TissueGate(gate)
    origins: set[tuple[int, int]] = set()
    for x0, y0, x1, y1 in merged:
        for y in _axis_origins(y0, y1, stride, tile_size, sh):
            for x in _axis_origins(x0, x1, stride, tile_size, sw):
                if tissue_gate.any_tissue(x, y, x + tile_size, y + tile_size):
                    origins.add((x, y))
    tiles = sorted(origins, key=lambda p: (p[1], p[0]))
    analyzed = sum((x1 - x0) * (y1 - y0) for x0, y0, x1, y1 in merged)
    return TilePlan(slide_id=slide_id, tile_size=tile_size, overlap=overlap,
                    tiles=tiles, analyzed_pixels=analyzed)


def _clamp_box(box: Box, sw: int, sh: int) -> Box:
    x0, y0, x1, y1 = box
    return (max(0, min(x0, sw)), max(0, min(y0, sh)),
            max(0, min(x1, sw)), max(0, min(y1, sh)))
