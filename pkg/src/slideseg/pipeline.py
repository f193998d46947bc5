"""End-to-end segmentation of one slide: tissue detection, tile planning,
parallel per-tile inference, stitching, contour extraction, and assembly
into predicted annotation layers, with wall-clock accounting.

Tiles are stitched per connected cluster of tile footprints (clusters are
bounding-box unions at least one pixel apart), so no labeled component can
ever straddle two stitched regions and no polygon merging across seams is
needed. Labels are uint8, so even a whole-slide cluster stays cheap; the
confidence plane is only materialized when a backend actually emits one.
"""

from __future__ import annotations

import csv
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .annotations import (DEFAULT_COLORS, AnnotationDocument, AnnotationLayer,
                          PolygonElement)
from .backends import Backend, BackendConfig, LabelMask
from .contours import (DEFAULT_EPSILON_PX, DEFAULT_MIN_AREA_PX, extract_contours,
                       simplify, stitch)
from .errors import BackendError
from .pyramid import RegionSpec, SlidePyramid
from .tiles import DEFAULT_OVERLAP, merge_boxes, plan_tiles
from .tissue import detect_tissue, full_tissue_mask, tissue_bounds

log = logging.getLogger(__name__)

TIMING_COLUMNS = ("slide_pixels", "analyzed_pixels", "wall_seconds",
                  "tile_count")


@dataclass(frozen=True)
class TimingRecord:
    slide_pixels: int
    analyzed_pixels: int
    wall_seconds: float
    tile_count: int

    def row(self) -> list[str]:
        return [str(self.slide_pixels), str(self.analyzed_pixels),
                f"{self.wall_seconds:.3f}", str(self.tile_count)]


@dataclass
class SegmentationResult:
    doc: AnnotationDocument  # predicted layers only
    timing: TimingRecord
    tile_count: int
    warnings: list[str] = field(default_factory=list)


def append_timing(path: str | Path, record: TimingRecord) -> None:
    """Append one row to the timing CSV, creating it with a header."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(TIMING_COLUMNS)
        writer.writerow(record.row())


def _cluster_tiles(tiles: list[tuple[int, int]], tile_size: int
                   ) -> list[list[tuple[int, int]]]:
    """Group tile origins into clusters of touching/overlapping footprints."""
    footprints = [(x, y, x + tile_size, y + tile_size) for x, y in tiles]
    boxes = merge_boxes(footprints, gap=1)
    groups: list[list[tuple[int, int]]] = [[] for _ in boxes]
    for x, y in tiles:
        for i, (bx0, by0, bx1, by1) in enumerate(boxes):
            if bx0 <= x < bx1 and by0 <= y < by1:
                groups[i].append((x, y))
                break
    return [g for g in groups if g]


def segment_slide(pyramid: SlidePyramid, cfg: BackendConfig,
                  tile_size: int = 512, overlap: int = DEFAULT_OVERLAP,
                  min_area_px: int = DEFAULT_MIN_AREA_PX,
                  epsilon_px: float = DEFAULT_EPSILON_PX,
                  workers: int = 4, full_grid: bool = False,
                  layer_names: list[str] | None = None,
                  progress=None) -> SegmentationResult:
    """Segment one slide and return predicted layers plus timing.

    `layer_names` overrides the per-class layer names (default: the backend's
    class names). `full_grid` disables tissue gating (every tile of the slide
    is processed) for timing comparisons. `progress` is an optional
    callable(done, total).
    """
    start = time.perf_counter()
    w0, h0 = pyramid.level_dims(0)
    warnings: list[str] = []

    if full_grid:
        tissue = full_tissue_mask(pyramid)
    else:
        tissue = detect_tissue(pyramid)
        warnings.extend(tissue.warnings)
    bounds = tissue_bounds(tissue, (w0, h0))
    plan = plan_tiles(bounds, (w0, h0), tile_size=tile_size, overlap=overlap,
                      gate=tissue, slide_id=pyramid.slide_id)

    names = layer_names if layer_names is not None else cfg.class_names[1:]
    if len(names) != len(cfg.class_names) - 1:
        raise BackendError("layer_names must name every non-background class")

    if not plan.tiles:
        doc = AnnotationDocument(slide_id=pyramid.slide_id, revision=0,
                                 layers=[])
        timing = TimingRecord(slide_pixels=w0 * h0,
                              analyzed_pixels=plan.analyzed_pixels,
                              wall_seconds=time.perf_counter() - start,
                              tile_count=0)
        return SegmentationResult(doc=doc, timing=timing, tile_count=0,
                                  warnings=warnings)

    backend = Backend(cfg)
    done = 0
    done_lock = threading.Lock()
    total = len(plan.tiles)

    def infer_one(origin: tuple[int, int]) -> LabelMask:
        nonlocal done
        x, y = origin
        tile = pyramid.read_region(RegionSpec(level=0, x=x, y=y,
                                              w=tile_size, h=tile_size))
        try:
            mask = backend.infer_tile(tile)
        except BackendError as exc:
            raise BackendError(f"tile ({x}, {y}): {exc}") from exc
        if progress is not None:
            with done_lock:
                done += 1
                progress(done, total)
        return mask

    try:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            masks = dict(zip(plan.tiles, pool.map(infer_one, plan.tiles)))
    finally:
        backend.close()

    contours_by_class: dict[int, list] = {cid: [] for cid in
                                          range(1, len(cfg.class_names))}
    for group in _cluster_tiles(plan.tiles, tile_size):
        region = stitch([(origin, masks[origin]) for origin in group],
                        classes=len(cfg.class_names))
        for cid in contours_by_class:
            for contour in extract_contours(region, cid,
                                            min_area_px=min_area_px):
                simplified = simplify(contour, epsilon_px)
                if simplified is None:
                    warnings.append(
                        f"class {cid} contour degenerated at epsilon="
                        f"{epsilon_px:g}; dropped")
                    continue
                contours_by_class[cid].append(simplified)

    layers = []
    for cid in sorted(contours_by_class):
        elements = []
        for i, contour in enumerate(contours_by_class[cid], start=1):
            elements.append(PolygonElement(
                element_id=f"p{cid}-{i}",
                points=[tuple(p) for p in contour.exterior],
                holes=[[tuple(p) for p in hole] for hole in contour.holes],
                source="predicted"))
        color = DEFAULT_COLORS[(cid - 1) % len(DEFAULT_COLORS)]
        layers.append(AnnotationLayer(name=names[cid - 1], class_id=cid,
                                      line_color=color, elements=elements))

    doc = AnnotationDocument(slide_id=pyramid.slide_id, revision=0,
                             layers=layers)
    timing = TimingRecord(slide_pixels=w0 * h0,
                          analyzed_pixels=plan.analyzed_pixels,
                          wall_seconds=time.perf_counter() - start,
                          tile_count=total)
    return SegmentationResult(doc=doc, timing=timing, tile_count=total,
                              warnings=warnings)
