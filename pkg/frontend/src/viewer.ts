/** Pure viewport math. zoom is continuous: screen pixels per level-0 pixel
 * is 2^(-zoom), the tile level is floor(zoom) clamped to the pyramid, and
 * the fraction selects the on-screen scale of that level. Polygon overlays
 * are transformed per viewport so they stay glued to slide pixels. */

import type {
  AnnotationDocument,
  AnnotationLayer,
  PolygonElement,
  SlideMeta,
} from "./types.js";

export interface ViewerState {
  slideId: string;
  centerX: number; // level-0 coords
  centerY: number;
  zoom: number;
  visibleLayers: Set<string>;
  selection: string | null;
}

export interface TileAddress {
  level: number;
  x: number;
  y: number;
}

export function levelForZoom(zoom: number, levels: number): number {
  return Math.min(Math.max(Math.floor(zoom), 0), levels - 1);
}

export function clampZoom(zoom: number, levels: number): number {
  return Math.min(Math.max(zoom, 0), levels - 1 + 4);
}

/** Level dims under repeated ceil-halving (= ceil(dim0 / 2^level)). */
export function levelDims(meta: SlideMeta, level: number): [number, number] {
  const f = 2 ** level;
  return [Math.ceil(meta.width0 / f), Math.ceil(meta.height0 / f)];
}

/** Slide-space rectangle covered by a viewport of viewW x viewH pixels. */
export function viewportBounds(
  state: ViewerState,
  viewW: number,
  viewH: number,
): { left: number; top: number; right: number; bottom: number } {
  const span = 2 ** state.zoom;
  return {
    left: state.centerX - (viewW / 2) * span,
    top: state.centerY - (viewH / 2) * span,
    right: state.centerX + (viewW / 2) * span,
    bottom: state.centerY + (viewH / 2) * span,
  };
}

/** Exactly the tiles intersecting the viewport at the current level,
 * row-major; never an address outside the level's tile grid. */
export function visibleTiles(
  meta: SlideMeta,
  state: ViewerState,
  viewW: number,
  viewH: number,
): TileAddress[] {
  const level = levelForZoom(state.zoom, meta.levels);
  const [lw, lh] = levelDims(meta, level);
  const tilesX = Math.ceil(lw / meta.tile_size);
  const tilesY = Math.ceil(lh / meta.tile_size);
  const span = meta.tile_size * 2 ** level; // level-0 px per tile edge
  const b = viewportBounds(state, viewW, viewH);
  const x0 = Math.max(0, Math.floor(b.left / span));
  const y0 = Math.max(0, Math.floor(b.top / span));
  const x1 = Math.min(tilesX - 1, Math.ceil(b.right / span) - 1);
  const y1 = Math.min(tilesY - 1, Math.ceil(b.bottom / span) - 1);
  const out: TileAddress[] = [];
  for (let y = y0; y <= y1; y += 1) {
    for (let x = x0; x <= x1; x += 1) {
      out.push({ level, x, y });
    }
  }
  return out;
}

export function slideToScreen(
  state: ViewerState,
  viewW: number,
  viewH: number,
  sx: number,
  sy: number,
): [number, number] {
  const scale = 2 ** -state.zoom;
  return [
    (sx - state.centerX) * scale + viewW / 2,
    (sy - state.centerY) * scale + viewH / 2,
  ];
}

export function screenToSlide(
  state: ViewerState,
  viewW: number,
  viewH: number,
  px: number,
  py: number,
): [number, number] {
  const span = 2 ** state.zoom;
  return [
    (px - viewW / 2) * span + state.centerX,
    (py - viewH / 2) * span + state.centerY,
  ];
}

/** Zoom about a fixed screen point so the slide pixel under the cursor
 * stays put. Returns the new state fields. */
export function zoomAt(
  state: ViewerState,
  viewW: number,
  viewH: number,
  px: number,
  py: number,
  dzoom: number,
  levels: number,
): { centerX: number; centerY: number; zoom: number } {
  const [sx, sy] = screenToSlide(state, viewW, viewH, px, py);
  const zoom = clampZoom(state.zoom + dzoom, levels);
  const span = 2 ** zoom;
  return {
    zoom,
    centerX: sx - (px - viewW / 2) * span,
    centerY: sy - (py - viewH / 2) * span,
  };
}

export interface OverlayElement {
  layer: AnnotationLayer;
  element: PolygonElement;
  predicted: boolean;
}

/** Elements to draw, honoring layer visibility; tile fetching is unaffected
 * by this filter (toggling a layer never refetches tiles). */
export function visibleElements(
  doc: AnnotationDocument,
  visibleLayers: Set<string>,
): OverlayElement[] {
  const out: OverlayElement[] = [];
  for (const layer of doc.layers) {
    if (!visibleLayers.has(layer.name)) continue;
    for (const element of layer.elements) {
      out.push({ layer, element, predicted: element.source === "predicted" });
    }
  }
  return out;
}

export function colorCss(rgb: [number, number, number]): string {
  return `rgb(${rgb[0]}, ${rgb[1]}, ${rgb[2]})`;
}

/** Initial view: whole slide centered, zoomed out just enough to fit. */
export function fitSlide(
  meta: SlideMeta,
  viewW: number,
  viewH: number,
): { centerX: number; centerY: number; zoom: number } {
  const zx = Math.log2(meta.width0 / viewW);
  const zy = Math.log2(meta.height0 / viewH);
  return {
    centerX: meta.width0 / 2,
    centerY: meta.height0 / 2,
    zoom: clampZoom(Math.max(zx, zy, 0), meta.levels),
  };
}
