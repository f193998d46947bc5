"""Tiled multi-resolution pyramids: build from a source raster, read back.

On-disk layout (lossless, bit-exact round trips):

    <dir>/meta.json                 width0, height0, tile_size, levels, mpp
    <dir>/tiles/<level>/<x>_<y>.png tile at tile indices (x, y), RGB

Level L has dimensions ceil(width0 / 2^L) x ceil(height0 / 2^L). The number
of levels is the smallest count whose top level fits inside a single tile.
Level L+1 is the 2x2 box average of level L with truncation toward zero, so
constant-color sources stay exactly constant at every level. Edge tiles are
stored at their true size, never padded.
"""

from __future__ import annotations

import json
import threading
from collections import OrderedDict
from dataclasses import dataclass
from io import BytesIO
from pathlib import Path

import numpy as np
from PIL import Image

# Gigapixel sources are the whole point; the decompression-bomb guard is
# sized for web images, not local slides.
Image.MAX_IMAGE_PIXELS = None

from .errors import FormatError, ValidationError

DEFAULT_TILE_SIZE = 512
ALLOWED_TILE_SIZES = (256, 512, 1024)
DEFAULT_CACHE_TILES = 1024

# Trade a little PNG size for much faster writes; still lossless.
_PNG_COMPRESS_LEVEL = 1


@dataclass(frozen=True)
class RegionSpec:
    """A rectangular read at one pyramid level, in that level's pixel grid."""

    level: int
    x: int
    y: int
    w: int
    h: int


def level_dimensions(width0: int, height0: int, level: int) -> tuple[int, int]:
    """Dimensions at `level` under the ceil-halving recurrence."""
    f = 1 << level
    return (width0 + f - 1) // f, (height0 + f - 1) // f


def level_count(width0: int, height0: int, tile_size: int) -> int:
    """Smallest level count whose top level fits within one tile."""
    levels = 1
    w, h = width0, height0
    while w > tile_size or h > tile_size:
        w = (w + 1) // 2
        h = (h + 1) // 2
        levels += 1
    return levels


def downsample_box2(img: np.ndarray, band_rows: int = 1024) -> np.ndarray:
    """2x2 box average with truncation toward zero; odd edges replicate.

    Replicating the last row/column before averaging makes a 1x2 or 2x1
    border block average exactly its two real pixels, so the result equals
    the mean over actual contributing pixels, truncated. Processed in row
    bands to keep the uint16 working set small on gigapixel inputs.
    """
    h, w = img.shape[:2]
    oh, ow = (h + 1) // 2, (w + 1) // 2
    out = np.empty((oh, ow) + img.shape[2:], dtype=np.uint8)
    for oy in range(0, oh, band_rows):
        oy2 = min(oh, oy + band_rows)
        src = img[2 * oy:min(h, 2 * oy2)]
        if src.shape[0] % 2:
            src = np.concatenate([src, src[-1:]], axis=0)
        if w % 2:
            src = np.concatenate([src, src[:, -1:]], axis=1)
        a = src.astype(np.uint16)
        s = a[0::2, 0::2] + a[0::2, 1::2] + a[1::2, 0::2] + a[1::2, 1::2]
        out[oy:oy2] = (s // 4).astype(np.uint8)
    return out


class _TileCache:
    """LRU cache of decoded tiles, keyed by (level, tx, ty). Thread-safe."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._lock = threading.Lock()
        self._tiles: OrderedDict[tuple[int, int, int], np.ndarray] = OrderedDict()

    def get(self, key):
        with self._lock:
            tile = self._tiles.get(key)
            if tile is not None:
                self._tiles.move_to_end(key)
            return tile

    def put(self, key, tile: np.ndarray) -> None:
        if self.capacity <= 0:
            return
        with self._lock:
            self._tiles[key] = tile
            self._tiles.move_to_end(key)
            while len(self._tiles) > self.capacity:
                self._tiles.popitem(last=False)


class SlidePyramid:
    """Read access to an on-disk pyramid. Immutable once built; freely shared
    across threads (the tile cache does its own locking and never changes
    read results)."""

    def __init__(self, storage_path: str | Path, cache_tiles: int = DEFAULT_CACHE_TILES):
        self.storage_path = Path(storage_path)
        meta_path = self.storage_path / "meta.json"
        if not meta_path.is_file():
            raise ValidationError(f"not a pyramid directory: {self.storage_path}")
        meta = json.loads(meta_path.read_text())
        self.width0 = int(meta["width0"])
        self.height0 = int(meta["height0"])
        self.tile_size = int(meta["tile_size"])
        self.levels = int(meta["levels"])
        self.mpp = meta.get("mpp")
        self.channels = 3
        self.slide_id = self.storage_path.name
        self._cache = _TileCache(cache_tiles)

    def level_dims(self, level: int) -> tuple[int, int]:
        if not 0 <= level < self.levels:
            raise ValidationError(f"level {level} out of range (0..{self.levels - 1})")
        return level_dimensions(self.width0, self.height0, level)

    def tile_path(self, level: int, tx: int, ty: int) -> Path:
        return self.storage_path / "tiles" / str(level) / f"{tx}_{ty}.png"

    def tile_counts(self, level: int) -> tuple[int, int]:
        w, h = self.level_dims(level)
        t = self.tile_size
        return (w + t - 1) // t, (h + t - 1) // t

    def read_tile(self, level: int, tx: int, ty: int) -> np.ndarray:
        """Decoded tile pixels at true (possibly smaller edge) size."""
        ntx, nty = self.tile_counts(level)
        if not (0 <= tx < ntx and 0 <= ty < nty):
            raise ValidationError(f"tile ({tx}, {ty}) out of range at level {level}")
        key = (level, tx, ty)
        tile = self._cache.get(key)
        if tile is None:
            with Image.open(self.tile_path(level, tx, ty)) as im:
                tile = np.asarray(im.convert("RGB"))
            tile.setflags(write=False)
            self._cache.put(key, tile)
        return tile

    def read_region(self, region: RegionSpec) -> np.ndarray:
        """Assemble an arbitrary region from tiles.

        The region is clamped to the level bounds; a region entirely outside
        the level is an error. Returns (h, w, 3) uint8, bit-identical across
        calls, threads, and cache states.
        """
        lw, lh = self.level_dims(region.level)
        if region.w < 1 or region.h < 1:
            raise ValidationError("region width and height must be >= 1")
        x0 = max(0, region.x)
        y0 = max(0, region.y)
        x1 = min(lw, region.x + region.w)
        y1 = min(lh, region.y + region.h)
        if x0 >= x1 or y0 >= y1:
            raise ValidationError(
                f"region {region} lies outside level {region.level} bounds {lw}x{lh}")
        t = self.tile_size
        out = np.empty((y1 - y0, x1 - x0, 3), dtype=np.uint8)
        for ty in range(y0 // t, (y1 - 1) // t + 1):
            for tx in range(x0 // t, (x1 - 1) // t + 1):
                tile = self.read_tile(region.level, tx, ty)
                tx0, ty0 = tx * t, ty * t
                sx0 = max(x0, tx0)
                sy0 = max(y0, ty0)
                sx1 = min(x1, tx0 + tile.shape[1])
                sy1 = min(y1, ty0 + tile.shape[0])
                out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = \
                    tile[sy0 - ty0:sy1 - ty0, sx0 - tx0:sx1 - tx0]
        return out

    def read_level(self, level: int) -> np.ndarray:
        w, h = self.level_dims(level)
        return self.read_region(RegionSpec(level, 0, 0, w, h))

    def thumbnail(self, max_dim: int) -> np.ndarray:
        """Smallest level whose max dimension fits `max_dim`, else the top
        level box-averaged down by further halvings. Pixel math stays exact;
        aspect ratio is preserved by construction."""
        if max_dim < 16:
            raise ValidationError("max_dim must be >= 16")
        for level in range(self.levels):
            w, h = self.level_dims(level)
            if max(w, h) <= max_dim:
                return self.read_level(level)
        img = self.read_level(self.levels - 1)
        while max(img.shape[0], img.shape[1]) > max_dim:
            img = downsample_box2(img)
        return img

    def thumbnail_level(self, max_dim: int) -> int:
        """The effective halving level of `thumbnail(max_dim)` output."""
        for level in range(self.levels):
            w, h = self.level_dims(level)
            if max(w, h) <= max_dim:
                return level
        level = self.levels - 1
        w, h = self.level_dims(level)
        while max(w, h) > max_dim:
            w = (w + 1) // 2
            h = (h + 1) // 2
            level += 1
        return level


def _write_level_tiles(out_dir: Path, level: int, img: np.ndarray, tile_size: int) -> None:
    level_dir = out_dir / "tiles" / str(level)
    level_dir.mkdir(parents=True, exist_ok=True)
    h, w = img.shape[:2]
    for ty in range(0, (h + tile_size - 1) // tile_size):
        for tx in range(0, (w + tile_size - 1) // tile_size):
            tile = img[ty * tile_size:(ty + 1) * tile_size,
                       tx * tile_size:(tx + 1) * tile_size]
            Image.fromarray(tile).save(
                level_dir / f"{tx}_{ty}.png", compress_level=_PNG_COMPRESS_LEVEL)


def build_pyramid(source: str | Path | np.ndarray, out_dir: str | Path,
                  tile_size: int = DEFAULT_TILE_SIZE,
                  mpp: float | None = None) -> SlidePyramid:
    """Build an on-disk pyramid from a raster file (PNG/TIFF/JPEG) or array.

    Deterministic: identical input bytes produce identical tile files.
    """
    if tile_size not in ALLOWED_TILE_SIZES:
        raise ValidationError(f"tile_size must be one of {ALLOWED_TILE_SIZES}")
    if isinstance(source, np.ndarray):
        img = np.ascontiguousarray(source)
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise ValidationError("array source must be (h, w, 3) uint8")
    else:
        try:
            with Image.open(source) as im:
                img = np.asarray(im.convert("RGB"))
        except Exception as exc:
            raise ValidationError(f"cannot decode source image {source}: {exc}") from exc
    h, w = img.shape[:2]
    if w == 0 or h == 0:
        raise ValidationError("source image has a zero dimension")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    levels = level_count(w, h, tile_size)
    _write_level_tiles(out_dir, 0, img, tile_size)
    for level in range(1, levels):
        img = downsample_box2(img)
        _write_level_tiles(out_dir, level, img, tile_size)
    meta = {"width0": w, "height0": h, "tile_size": tile_size,
            "levels": levels, "mpp": mpp}
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True))
    return SlidePyramid(out_dir)


def decode_image_bytes(data: bytes) -> np.ndarray:
    """Decode an uploaded raster; FormatError if undecodable."""
    try:
        with Image.open(BytesIO(data)) as im:
            return np.asarray(im.convert("RGB"))
    except Exception as exc:
        raise FormatError(f"cannot decode uploaded image: {exc}") from exc
