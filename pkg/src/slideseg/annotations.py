"""Layered annotation documents and their JSON interchange form.

Schema (all of it):

    {"slide_id": ..., "revision": ..., "layers": [
        {"name": ..., "class_id": ..., "line_color": [r, g, b],
         "elements": [
            {"id": ..., "type": "polygon", "points": [[x, y], ...],
             "holes": [[[x, y], ...], ...], "source": ..., "negative": ...}
        ]}
    ]}

Coordinates are level-0 pixel-corner values rounded to at most 2 decimals at
construction time, which keeps JSON and XML round trips exact. Documents are
immutable values; every edit returns a new document with revision + 1.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import FormatError, ValidationError
from .geometry import rasterize_rings, ring_self_intersects

log = logging.getLogger(__name__)

SOURCES = ("predicted", "human", "imported")

# Layer colors for predicted classes 1, 2, 3, ... Green first: predictions
# render green in the reference workflow.
DEFAULT_COLORS = ((0, 255, 0), (255, 0, 0), (0, 0, 255), (255, 255, 0),
                  (255, 0, 255), (0, 255, 255), (255, 128, 0), (128, 0, 255))

Point = tuple[float, float]


def _round_pt(p) -> Point:
    return (round(float(p[0]), 2), round(float(p[1]), 2))


def _round_ring(points) -> list[Point]:
    return [_round_pt(p) for p in points]


@dataclass(frozen=True)
class PolygonElement:
    element_id: str
    points: list[Point]
    holes: list[list[Point]] = field(default_factory=list)
    source: str = "human"
    negative: bool = False

    def __post_init__(self):
        object.__setattr__(self, "points", _round_ring(self.points))
        object.__setattr__(self, "holes", [_round_ring(h) for h in self.holes])
        if len(self.points) < 3:
            raise ValidationError("polygon needs at least 3 vertices")
        for hole in self.holes:
            if len(hole) < 3:
                raise ValidationError("hole needs at least 3 vertices")
        if self.source not in SOURCES:
            raise ValidationError(f"unknown source {self.source!r}")

    def rings(self) -> list[np.ndarray]:
        return [np.asarray(self.points, dtype=np.float64)] + \
               [np.asarray(h, dtype=np.float64) for h in self.holes]


@dataclass(frozen=True)
class AnnotationLayer:
    name: str
    class_id: int
    line_color: tuple[int, int, int]
    elements: list[PolygonElement] = field(default_factory=list)

    def __post_init__(self):
        if self.class_id < 1:
            raise ValidationError("class_id must be >= 1")
        color = tuple(int(c) for c in self.line_color)
        if len(color) != 3 or any(c < 0 or c > 255 for c in color):
            raise ValidationError("line_color must be three 0..255 values")
        object.__setattr__(self, "line_color", color)


@dataclass(frozen=True)
class AnnotationDocument:
    slide_id: str
    revision: int = 0
    layers: list[AnnotationLayer] = field(default_factory=list)
    modified_at: float | None = field(default=None, compare=False)

    def __post_init__(self):
        names = [la.name for la in self.layers]
        if len(set(names)) != len(names):
            raise ValidationError("layer names must be unique")
        ids = [la.class_id for la in self.layers]
        if len(set(ids)) != len(ids):
            raise ValidationError("class_ids must be unique")
        eids = [e.element_id for la in self.layers for e in la.elements]
        if len(set(eids)) != len(eids):
            raise ValidationError("element ids must be unique")

    def layer(self, name: str) -> AnnotationLayer:
        for la in self.layers:
            if la.name == name:
                return la
        raise ValidationError(f"unknown layer {name!r}")

    def element_count(self) -> int:
        return sum(len(la.elements) for la in self.layers)


# ---------------------------------------------------------------------------
# JSON


def to_json(doc: AnnotationDocument) -> bytes:
    return json.dumps(to_jsonable(doc), indent=1).encode("utf-8")


def to_jsonable(doc: AnnotationDocument) -> dict:
    return {
        "slide_id": doc.slide_id,
        "revision": doc.revision,
        "layers": [
            {
                "name": la.name,
                "class_id": la.class_id,
                "line_color": list(la.line_color),
                "elements": [
                    {
                        "id": el.element_id,
                        "type": "polygon",
                        "points": [[x, y] for x, y in el.points],
                        "holes": [[[x, y] for x, y in h] for h in el.holes],
                        "source": el.source,
                        "negative": el.negative,
                    }
                    for el in la.elements
                ],
            }
            for la in doc.layers
        ],
    }


def _need(obj: dict, key: str, kinds, path: str):
    if not isinstance(obj, dict):
        raise FormatError("expected an object", path)
    if key not in obj:
        raise FormatError(f"missing key {key!r}", path)
    val = obj[key]
    if not isinstance(val, kinds) or isinstance(val, bool) and kinds is not bool:
        want = kinds.__name__ if isinstance(kinds, type) else \
            "/".join(k.__name__ for k in kinds)
        raise FormatError(f"{key!r} must be {want}", f"{path}.{key}")
    return val


def _warn_unknown(obj: dict, known: set, path: str):
    for key in obj:
        if key not in known:
            log.warning("ignoring unknown field %r at %s", key, path)


def _parse_ring(val, path: str) -> list[Point]:
    if not isinstance(val, list):
        raise FormatError("ring must be an array", path)
    out = []
    for i, pt in enumerate(val):
        if (not isinstance(pt, list) or len(pt) != 2
                or not all(isinstance(c, (int, float)) and not isinstance(c, bool)
                           for c in pt)):
            raise FormatError("vertex must be [x, y]", f"{path}[{i}]")
        out.append((float(pt[0]), float(pt[1])))
    return out


def from_jsonable(data, path: str = "$") -> AnnotationDocument:
    slide_id = _need(data, "slide_id", str, path)
    revision = _need(data, "revision", int, path)
    if revision < 0:
        raise FormatError("revision must be >= 0", f"{path}.revision")
    raw_layers = _need(data, "layers", list, path)
    _warn_unknown(data, {"slide_id", "revision", "layers", "modified_at"}, path)
    layers = []
    for i, raw in enumerate(raw_layers):
        lpath = f"{path}.layers[{i}]"
        name = _need(raw, "name", str, lpath)
        class_id = _need(raw, "class_id", int, lpath)
        color = _need(raw, "line_color", list, lpath)
        if len(color) != 3 or not all(isinstance(c, int) and not isinstance(c, bool)
                                      for c in color):
            raise FormatError("line_color must be [r, g, b]", f"{lpath}.line_color")
        raw_elements = _need(raw, "elements", list, lpath)
        _warn_unknown(raw, {"name", "class_id", "line_color", "elements"}, lpath)
        elements = []
        for j, rel in enumerate(raw_elements):
            epath = f"{lpath}.elements[{j}]"
            eid = _need(rel, "id", str, epath)
            etype = _need(rel, "type", str, epath)
            if etype != "polygon":
                raise FormatError(f"unsupported element type {etype!r}",
                                  f"{epath}.type")
            points = _parse_ring(_need(rel, "points", list, epath),
                                 f"{epath}.points")
            raw_holes = rel.get("holes", [])
            if not isinstance(raw_holes, list):
                raise FormatError("'holes' must be an array", f"{epath}.holes")
            holes = [_parse_ring(h, f"{epath}.holes[{k}]")
                     for k, h in enumerate(raw_holes)]
            source = rel.get("source", "imported")
            if source not in SOURCES:
                raise FormatError(f"unknown source {source!r}", f"{epath}.source")
            negative = rel.get("negative", False)
            if not isinstance(negative, bool):
                raise FormatError("'negative' must be a boolean",
                                  f"{epath}.negative")
            _warn_unknown(rel, {"id", "type", "points", "holes", "source",
                                "negative"}, epath)
            try:
                elements.append(PolygonElement(eid, points, holes, source,
                                               negative))
            except ValidationError as exc:
                raise FormatError(str(exc), epath) from exc
        try:
            layers.append(AnnotationLayer(name, class_id, tuple(color), elements))
        except ValidationError as exc:
            raise FormatError(str(exc), lpath) from exc
    try:
        return AnnotationDocument(slide_id=slide_id, revision=revision,
                                  layers=layers)
    except ValidationError as exc:
        raise FormatError(str(exc), path) from exc


def from_json(data: bytes | str) -> AnnotationDocument:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        parsed = json.loads(data)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", f"line {exc.lineno}") from exc
    return from_jsonable(parsed)


# ---------------------------------------------------------------------------
# Edits


def _fresh_id(doc: AnnotationDocument) -> str:
    taken = {e.element_id for la in doc.layers for e in la.elements}
    n = 1
    while f"h-{n}" in taken:
        n += 1
    return f"h-{n}"


def apply_edit(doc: AnnotationDocument, action: str, layer: str,
               element_id: str | None = None, points=None, holes=None,
               negative: bool = False) -> AnnotationDocument:
    """Apply one add / delete / replace edit; returns a new document with
    revision + 1. Added and replaced elements get source=human and a validity
    check (>= 3 vertices, no self-intersection)."""
    target = doc.layer(layer)

    def checked_element(eid: str) -> PolygonElement:
        el = PolygonElement(eid, points, holes or [], source="human",
                            negative=negative)
        for ring in el.rings():
            if ring_self_intersects(ring):
                raise ValidationError("polygon is self-intersecting")
        return el

    if action == "add":
        new_elements = target.elements + [checked_element(_fresh_id(doc))]
    elif action in ("delete", "replace"):
        if element_id is None:
            raise ValidationError(f"{action} needs an element_id")
        if all(e.element_id != element_id for e in target.elements):
            raise ValidationError(f"unknown element id {element_id!r}")
        if action == "delete":
            new_elements = [e for e in target.elements
                            if e.element_id != element_id]
        else:
            new_elements = [checked_element(element_id)
                            if e.element_id == element_id else e
                            for e in target.elements]
    else:
        raise ValidationError(f"unknown edit action {action!r}")

    new_layer = replace(target, elements=new_elements)
    layers = [new_layer if la.name == layer else la for la in doc.layers]
    return replace(doc, layers=layers, revision=doc.revision + 1)


def merge_predicted(doc: AnnotationDocument,
                    predicted: list[AnnotationLayer]) -> AnnotationDocument:
    """Fold freshly predicted layers into a document.

    For each incoming layer, only source=predicted elements of the same-named
    existing layer are replaced; human and imported elements survive. Layers
    not present yet are appended. Revision + 1.
    """
    by_name = {la.name: la for la in predicted}
    layers = []
    for la in doc.layers:
        if la.name in by_name:
            incoming = by_name.pop(la.name)
            kept = [e for e in la.elements if e.source != "predicted"]
            layers.append(replace(la, class_id=incoming.class_id,
                                  line_color=incoming.line_color,
                                  elements=kept + list(incoming.elements)))
        else:
            layers.append(la)
    for la in predicted:
        if la.name in by_name:
            layers.append(la)
    return replace(doc, layers=layers, revision=doc.revision + 1)


# ---------------------------------------------------------------------------
# Rasterization


def rasterize(doc: AnnotationDocument, level: int,
              layer_names: list[str] | None = None,
              window: tuple[int, int, int, int] | None = None,
              level_dims: tuple[int, int] | None = None) -> np.ndarray:
    """Class-index raster of selected layers at a pyramid level.

    `window` = (x, y, w, h) in that level's pixel grid; `level_dims` is
    required when no window is given. Later layers overwrite earlier ones
    where they overlap. Within a layer, negative elements erase the layer's
    own coverage. Coordinates scale as value / 2^level.
    """
    if level < 0:
        raise ValidationError("level must be >= 0")
    if window is None:
        if level_dims is None:
            raise ValidationError("need window or level_dims")
        window = (0, 0, level_dims[0], level_dims[1])
    x0, y0, w, h = window
    scale = float(1 << level)
    out = np.zeros((h, w), dtype=np.uint8)
    selected = doc.layers if layer_names is None else \
        [doc.layer(name) for name in layer_names]
    for la in selected:
        covered = np.zeros((h, w), dtype=bool)
        erased = np.zeros((h, w), dtype=bool)
        for el in la.elements:
            # Per element so overlapping exteriors union instead of
            # cancelling under the even-odd rule; holes punch only their
            # own element.
            rings = [ring / scale for ring in el.rings()]
            filled = rasterize_rings(rings, w, h, origin=(x0, y0))
            if el.negative:
                erased |= filled
            else:
                covered |= filled
        covered &= ~erased
        out[covered] = la.class_id
    return out
