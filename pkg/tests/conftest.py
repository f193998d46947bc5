"""Shared test helpers: tiny pyramids, document generators, a CLI runner."""

from __future__ import annotations

import subprocess
import sys

import numpy as np
import pytest

from slideseg.annotations import (SOURCES, AnnotationDocument, AnnotationLayer,
                                  PolygonElement)
from slideseg.pyramid import SlidePyramid, build_pyramid


def make_pyramid(tmp_path, image: np.ndarray, tile_size: int = 512,
                 name: str = "pyr", **kw) -> SlidePyramid:
    return build_pyramid(image, tmp_path / name, tile_size=tile_size, **kw)


def white(size: int) -> np.ndarray:
    return np.full((size, size, 3), 255, dtype=np.uint8)


def star_ring(cx: float, cy: float, radius: float, n: int,
              rng: np.random.Generator) -> list[tuple[float, float]]:
    """Star-shaped polygon around (cx, cy): never self-intersecting. Vertex
    radii stay in [0.55r, r] and angular gaps below 1.5*(2pi/n), so chords
    never cut deeper than 0.55r*cos(1.5pi/n); for n >= 8 anything within
    0.4r of the center is strictly inside."""
    step = 2 * np.pi / n
    angles = (np.arange(n) * step + rng.uniform(0, 2 * np.pi)
              + rng.uniform(-0.25 * step, 0.25 * step, size=n))
    radii = rng.uniform(0.55 * radius, radius, size=n)
    return [(cx + r * np.cos(a), cy + r * np.sin(a))
            for a, r in zip(angles, radii)]


def random_document(rng: np.random.Generator, slide_id: str = "slide",
                    n_layers: int = 2, max_elements: int = 8,
                    hole_chance: float = 0.4,
                    negative_chance: float = 0.15) -> AnnotationDocument:
    """Valid random document. Each element lives in its own 100x100 grid cell
    so hole containment and negative-region detachment are unambiguous under
    the XML round trip."""
    layers = []
    cell = 0
    for li in range(n_layers):
        elements = []
        for _ in range(int(rng.integers(1, max_elements + 1))):
            cx = 50.0 + 100.0 * (cell % 64)
            cy = 50.0 + 100.0 * (cell // 64)
            cell += 1
            n = int(rng.integers(8, 16))
            points = star_ring(cx, cy, 40.0, n, rng)
            holes = []
            negative = bool(rng.random() < negative_chance)
            if not negative and rng.random() < hole_chance:
                holes = [star_ring(cx, cy, 16.0, int(rng.integers(6, 10)), rng)]
            elements.append(PolygonElement(
                element_id=f"e{li}-{len(elements)}-{cell}", points=points,
                holes=holes, source=str(rng.choice(SOURCES)),
                negative=negative))
        color = tuple(int(c) for c in rng.integers(0, 256, size=3))
        layers.append(AnnotationLayer(name=f"layer-{li}", class_id=li + 1,
                                      line_color=color, elements=elements))
    return AnnotationDocument(slide_id=slide_id,
                              revision=int(rng.integers(0, 10)), layers=layers)


def run_cli(*args, cwd=None, timeout=600):
    return subprocess.run([sys.executable, "-m", "slideseg", *map(str, args)],
                          capture_output=True, text=True, cwd=cwd,
                          timeout=timeout)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
