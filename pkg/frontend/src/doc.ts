/** Pure document edits. Every operation returns a new document and leaves
 * its input untouched; vertex coordinates are rounded to 2 decimals at the
 * door so geometry round-trips the wire format without precision loss. */

import type {
  AnnotationDocument,
  AnnotationLayer,
  Point,
  PolygonElement,
} from "./types.js";

export function round2(v: number): number {
  const r = Math.round(v * 100) / 100;
  return Object.is(r, -0) ? 0 : r;
}

export function cloneDoc(doc: AnnotationDocument): AnnotationDocument {
  return structuredClone(doc);
}

export function docsEqual(a: AnnotationDocument, b: AnnotationDocument): boolean {
  return JSON.stringify(a) === JSON.stringify(b);
}

export function findLayer(
  doc: AnnotationDocument,
  name: string,
): AnnotationLayer {
  const layer = doc.layers.find((l) => l.name === name);
  if (!layer) throw new Error(`unknown layer ${name}`);
  return layer;
}

export function findElement(
  doc: AnnotationDocument,
  elementId: string,
): { layer: AnnotationLayer; element: PolygonElement } {
  for (const layer of doc.layers) {
    const element = layer.elements.find((e) => e.id === elementId);
    if (element) return { layer, element };
  }
  throw new Error(`unknown element ${elementId}`);
}

/** Smallest "h-<n>" not already taken anywhere in the document. */
export function freshElementId(doc: AnnotationDocument): string {
  const taken = new Set<string>();
  for (const layer of doc.layers) {
    for (const element of layer.elements) taken.add(element.id);
  }
  let n = 1;
  while (taken.has(`h-${n}`)) n += 1;
  return `h-${n}`;
}

export function addPolygon(
  doc: AnnotationDocument,
  layerName: string,
  points: Point[],
): { doc: AnnotationDocument; id: string } {
  if (points.length < 3) {
    throw new Error("a polygon needs at least 3 vertices");
  }
  const next = cloneDoc(doc);
  const id = freshElementId(next);
  findLayer(next, layerName).elements.push({
    id,
    type: "polygon",
    points: points.map(([x, y]) => [round2(x), round2(y)] as Point),
    holes: [],
    source: "human",
    negative: false,
  });
  return { doc: next, id };
}

export function deleteElement(
  doc: AnnotationDocument,
  elementId: string,
): AnnotationDocument {
  findElement(doc, elementId); // throws on unknown id
  const next = cloneDoc(doc);
  for (const layer of next.layers) {
    layer.elements = layer.elements.filter((e) => e.id !== elementId);
  }
  return next;
}

export function moveVertex(
  doc: AnnotationDocument,
  elementId: string,
  vertexIndex: number,
  to: Point,
): AnnotationDocument {
  const next = cloneDoc(doc);
  const { element } = findElement(next, elementId);
  if (vertexIndex < 0 || vertexIndex >= element.points.length) {
    throw new Error(`vertex ${vertexIndex} out of range`);
  }
  element.points[vertexIndex] = [round2(to[0]), round2(to[1])];
  return next;
}

/** Insert a vertex after `segmentIndex` (on the edge to the next vertex). */
export function insertVertex(
  doc: AnnotationDocument,
  elementId: string,
  segmentIndex: number,
  at: Point,
): AnnotationDocument {
  const next = cloneDoc(doc);
  const { element } = findElement(next, elementId);
  if (segmentIndex < 0 || segmentIndex >= element.points.length) {
    throw new Error(`segment ${segmentIndex} out of range`);
  }
  element.points.splice(segmentIndex + 1, 0, [round2(at[0]), round2(at[1])]);
  return next;
}

/** Ray-cast point-in-polygon test in slide coordinates (exterior only). */
export function pointInPolygon(points: Point[], x: number, y: number): boolean {
  let inside = false;
  for (let i = 0, j = points.length - 1; i < points.length; j = i, i += 1) {
    const [xi, yi] = points[i]!;
    const [xj, yj] = points[j]!;
    if (yi > y !== yj > y && x < ((xj - xi) * (y - yi)) / (yj - yi) + xi) {
      inside = !inside;
    }
  }
  return inside;
}
