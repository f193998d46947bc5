"""ImageScope-style annotation XML.

Structure emitted (and accepted):

    <Annotations>
      <Annotation Id="1" LineColor="65280" Name="layer">
        <Regions>
          <Region Id="1" NegativeROA="0">
            <Vertices>
              <Vertex X="10" Y="20.5"/>
              ...

One Annotation per layer. LineColor is the decimal of B*65536 + G*256 + R
(the BGR packing the viewer uses). Holes are emitted as their own Regions
with NegativeROA="1"; on import a negative region becomes a hole of the
smallest positive region that contains its first vertex, or a standalone
negative element when nothing contains it.
"""

from __future__ import annotations

import logging
import xml.etree.ElementTree as ET
from xml.dom import minidom

import numpy as np

from .annotations import (AnnotationDocument, AnnotationLayer, PolygonElement,
                          Point)
from .errors import FormatError, ValidationError
from .geometry import point_in_ring, ring_area

log = logging.getLogger(__name__)


def pack_color(rgb: tuple[int, int, int]) -> int:
    r, g, b = rgb
    return b * 65536 + g * 256 + r


def unpack_color(value: int) -> tuple[int, int, int]:
    if value < 0 or value > 0xFFFFFF:
        raise ValidationError(f"LineColor out of range: {value}")
    return (value & 0xFF, (value >> 8) & 0xFF, (value >> 16) & 0xFF)


def _fmt(v: float) -> str:
    """Coordinate attribute: at most 2 decimals, no trailing zeros."""
    s = f"{v:.2f}".rstrip("0").rstrip(".")
    return s if s not in ("-0", "") else "0"


def _region(parent: ET.Element, region_id: int, ring: list[Point],
            negative: bool) -> None:
    region = ET.SubElement(parent, "Region",
                           Id=str(region_id),
                           NegativeROA="1" if negative else "0")
    vertices = ET.SubElement(region, "Vertices")
    for x, y in ring:
        ET.SubElement(vertices, "Vertex", X=_fmt(x), Y=_fmt(y))


def to_xml(doc: AnnotationDocument) -> bytes:
    root = ET.Element("Annotations")
    for i, layer in enumerate(doc.layers, start=1):
        ann = ET.SubElement(root, "Annotation",
                            Id=str(i),
                            LineColor=str(pack_color(layer.line_color)),
                            Name=layer.name)
        regions = ET.SubElement(ann, "Regions")
        rid = 1
        for el in layer.elements:
            _region(regions, rid, el.points, el.negative)
            rid += 1
            for hole in el.holes:
                _region(regions, rid, hole, True)
                rid += 1
    rough = ET.tostring(root, encoding="utf-8")
    return minidom.parseString(rough).toprettyxml(indent="  ",
                                                  encoding="utf-8")


def _parse_regions(ann: ET.Element, layer_desc: str):
    """Yield (ring, negative) for each usable Region of one Annotation."""
    out = []
    for region in ann.iter("Region"):
        vertices = region.find("Vertices")
        if vertices is None:
            log.warning("%s: Region %s has no Vertices; skipped",
                        layer_desc, region.get("Id", "?"))
            continue
        ring: list[Point] = []
        for vertex in vertices.iter("Vertex"):
            try:
                ring.append((float(vertex.get("X")), float(vertex.get("Y"))))
            except (TypeError, ValueError):
                raise FormatError("Vertex needs numeric X and Y attributes",
                                  layer_desc)
        if len(ring) < 3:
            log.warning("%s: Region %s has fewer than 3 vertices; skipped",
                        layer_desc, region.get("Id", "?"))
            continue
        negative = region.get("NegativeROA", "0") == "1"
        out.append((ring, negative))
    return out


def from_xml(data: bytes | str, slide_id: str = "") -> AnnotationDocument:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        line, col = exc.position
        raise FormatError(f"malformed XML: {exc.msg.split(':')[0]}",
                          f"line {line}, column {col}") from exc
    if root.tag != "Annotations":
        raise FormatError(f"expected <Annotations> root, got <{root.tag}>",
                          "line 1")
    layers = []
    eid = 0
    for index, ann in enumerate(root.iter("Annotation"), start=1):
        name = ann.get("Name") or f"layer_{index}"
        try:
            color = unpack_color(int(ann.get("LineColor", "0")))
        except ValueError:
            raise FormatError("LineColor must be a decimal integer",
                              f"Annotation {index}")
        parsed = _parse_regions(ann, f"Annotation {index} ({name})")
        # (region position, exterior, holes) so document order survives import
        positives = [(pos, ring, []) for pos, (ring, neg) in enumerate(parsed)
                     if not neg]
        # Attach each negative ring as a hole of the smallest positive ring
        # containing its first vertex; keep it as a standalone negative
        # element at its original position otherwise.
        standalone = []
        for pos, (ring, neg) in enumerate(parsed):
            if not neg:
                continue
            x, y = ring[0]
            best = None
            best_area = None
            for item in positives:
                ext = np.asarray(item[1], dtype=np.float64)
                if point_in_ring(ext, x, y):
                    area = abs(ring_area(ext))
                    if best_area is None or area < best_area:
                        best, best_area = item, area
            if best is not None:
                best[2].append(ring)
            else:
                standalone.append((pos, ring))
        recovered = [(pos, ring, holes, False)
                     for pos, ring, holes in positives]
        recovered += [(pos, ring, [], True) for pos, ring in standalone]
        elements = []
        for _, ring, holes, negative in sorted(recovered, key=lambda t: t[0]):
            eid += 1
            elements.append(PolygonElement(f"x-{eid}", ring, holes,
                                           source="imported",
                                           negative=negative))
        layers.append(AnnotationLayer(name=name, class_id=index,
                                      line_color=color, elements=elements))
    return AnnotationDocument(slide_id=slide_id, revision=0, layers=layers)
