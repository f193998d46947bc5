"""Training-patch export: tissue tiles with their annotation label masks,
plus a seeded sample of empty tissue tiles, written as lossless PNG pairs
with a JSON manifest.

Layout under the output folder:

    patches/{slide_id}_{x}_{y}.png   RGB patch
    masks/{slide_id}_{x}_{y}.png     8-bit class-index mask
    manifest.json
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .annotations import AnnotationDocument, rasterize
from .errors import FormatError, ValidationError
from .pyramid import RegionSpec, SlidePyramid
from .tiles import plan_tiles
from .tissue import detect_tissue, tissue_bounds

log = logging.getLogger(__name__)


@dataclass
class TrainingManifest:
    folder: str
    patch_size: int
    class_names: list[str]
    seed: int
    entries: list[dict] = field(default_factory=list)  # patch, mask, slide_id, origin

    def to_jsonable(self) -> dict:
        return {"folder": self.folder, "patch_size": self.patch_size,
                "class_names": self.class_names, "seed": self.seed,
                "entries": self.entries}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_jsonable(), indent=1))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrainingManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ValidationError(f"manifest not found: {path}")
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid manifest JSON: {exc.msg}",
                              f"{path}:{exc.lineno}") from exc
        try:
            return cls(folder=data["folder"], patch_size=int(data["patch_size"]),
                       class_names=list(data["class_names"]),
                       seed=int(data["seed"]), entries=list(data["entries"]))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"manifest missing field: {exc}", str(path)) from exc

    def validate(self) -> None:
        """Check the manifest invariants: files exist, mask values in range."""
        folder = Path(self.folder)
        n_classes = len(self.class_names)
        for entry in self.entries:
            for key in ("patch", "mask"):
                p = folder / entry[key]
                if not p.exists():
                    raise ValidationError(f"manifest references missing file {p}")
            mask = np.asarray(Image.open(folder / entry["mask"]))
            if mask.size and int(mask.max()) >= n_classes:
                raise ValidationError(
                    f"mask {entry['mask']} has values >= class count {n_classes}")


def class_names_for(doc: AnnotationDocument,
                    layer_names: list[str]) -> list[str]:
    """Class-name table indexed by class id, 'background' at 0."""
    selected = [doc.layer(n) for n in layer_names]
    top = max(la.class_id for la in selected)
    names = ["background"] + [f"class_{i}" for i in range(1, top + 1)]
    for la in selected:
        names[la.class_id] = la.name
    return names


def _padded_read(pyramid: SlidePyramid, x: int, y: int, size: int) -> np.ndarray:
    """Level-0 read clamped to the slide, white-padded to size x size."""
    w0, h0 = pyramid.level_dims(0)
    w = min(size, w0 - x)
    h = min(size, h0 - y)
    region = pyramid.read_region(RegionSpec(level=0, x=x, y=y, w=w, h=h))
    if w == size and h == size:
        return region
    out = np.full((size, size, 3), 255, dtype=np.uint8)
    out[:h, :w] = region
    return out


def export_training_patches(doc: AnnotationDocument, pyramid: SlidePyramid,
                            layer_names: list[str], out_dir: str | Path,
                            patch_size: int = 512,
                            background_ratio: float = 0.0,
                            overlap: int = 0, seed: int = 0,
                            thumb_max_dim: int = 2048) -> TrainingManifest:
    """Write (patch, mask) pairs for every tissue tile overlapping the chosen
    layers, plus floor(background_ratio * positives) seeded empty tissue
    tiles, and a manifest.json describing them."""
    if background_ratio < 0:
        raise ValidationError("background_ratio must be >= 0")
    if not layer_names:
        raise ValidationError("no layers selected")
    class_names = class_names_for(doc, layer_names)

    w0, h0 = pyramid.level_dims(0)
    if w0 >= patch_size and h0 >= patch_size:
        tissue = detect_tissue(pyramid, thumb_max_dim=thumb_max_dim)
        bounds = tissue_bounds(tissue, (w0, h0))
        plan = plan_tiles(bounds, (w0, h0), tile_size=patch_size,
                          overlap=overlap, gate=tissue,
                          slide_id=pyramid.slide_id)
        origins = plan.tiles
    else:
        origins = [(0, 0)]  # undersized slide: one white-padded patch

    positives: list[tuple[int, int, np.ndarray]] = []
    empties: list[tuple[int, int]] = []
    for x, y in origins:
        mask = rasterize(doc, level=0, layer_names=layer_names,
                         window=(x, y, patch_size, patch_size))
        if mask.any():
            positives.append((x, y, mask))
        else:
            empties.append((x, y))
    if not positives:
        raise ValidationError("empty training layer")

    n_background = int(background_ratio * len(positives))
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(len(empties),
                               size=min(n_background, len(empties)),
                               replace=False).tolist()) if empties else []
    background = [empties[i] for i in chosen]

    out_dir = Path(out_dir)
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    manifest = TrainingManifest(folder=str(out_dir), patch_size=patch_size,
                                class_names=class_names, seed=seed)

    def emit(x: int, y: int, mask: np.ndarray) -> None:
        stem = f"{pyramid.slide_id}_{x}_{y}.png"
        patch = _padded_read(pyramid, x, y, patch_size)
        Image.fromarray(patch).save(out_dir / "patches" / stem)
        Image.fromarray(mask).save(out_dir / "masks" / stem)
        manifest.entries.append({"patch": f"patches/{stem}",
                                 "mask": f"masks/{stem}",
                                 "slide_id": pyramid.slide_id,
                                 "origin": [x, y]})

    for x, y, mask in positives:
        emit(x, y, mask)
    for x, y in background:
        emit(x, y, np.zeros((patch_size, patch_size), dtype=np.uint8))
    manifest.save(out_dir / "manifest.json")
    return manifest
