"""Tiled slide packages: write, open, region reads, patch sampling, masks, overlays.

A package is a directory holding ``manifest.json`` plus lossless PNG tiles
named ``L{level}_r{row}_c{col}.png``. Level 0 is full resolution and every
further level halves both dimensions (2×2 box average).
"""

import json
import logging
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, PngImagePlugin
from pydantic import ValidationError
from scipy import ndimage

from app.models.slide import (
    LevelInfo,
    OverlayRegion,
    Patch,
    SlideManifest,
    SlidePackage,
    StainRecord,
    TissueMask,
)

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1

# Overlay colors by region label (grade 3 green, grade 4 blue).
DEFAULT_COLORS: dict[str, tuple[int, int, int]] = {
    "3": (0, 255, 0),
    "4": (0, 0, 255),
    "cribriform": (255, 0, 255),
    "nucleoli": (255, 255, 0),
}


def tile_name(level: int, row: int, col: int) -> str:
    return f"L{level}_r{row}_c{col}.png"


def _tile_grid(info: LevelInfo) -> tuple[int, int]:
    rows = -(-info.height // info.tile_size)
    cols = -(-info.width // info.tile_size)
    return rows, cols


def _write_png(path: Path, pixels: np.ndarray, text: dict[str, str] | None = None) -> None:
    info = None
    if text:
        info = PngImagePlugin.PngInfo()
        for key, value in text.items():
            info.add_text(key, value)
    Image.fromarray(pixels).save(path, format="PNG", pnginfo=info)


def _write_manifest(root: Path, manifest: SlideManifest) -> None:
    (root / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------

def downsample_2x(rgb: np.ndarray) -> np.ndarray:
    """Halve both dimensions by 2×2 box averaging (odd trailing row/col dropped)."""
    h, w = rgb.shape[0] // 2, rgb.shape[1] // 2
    blocks = rgb[: 2 * h, : 2 * w].astype(np.float64).reshape(h, 2, w, 2, -1)
    return np.rint(blocks.mean(axis=(1, 3))).astype(np.uint8).reshape(h, w, *rgb.shape[2:])


def write_slide(
    root: str | Path,
    rgb: np.ndarray,
    mpp: float,
    label: str | None = None,
    tile_size: int = 512,
    n_levels: int | None = None,
    min_level_size: int = 128,
) -> SlidePackage:
    """Write an RGB level-0 image as a tiled package.

    Without ``n_levels`` the pyramid keeps halving while the next level's
    short side stays ≥ ``min_level_size``.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("level-0 image must be an (H, W, 3) uint8 array")
    if mpp <= 0:
        raise ValueError("mpp must be > 0")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    pyramid = [rgb]
    while True:
        if n_levels is not None and len(pyramid) >= n_levels:
            break
        h, w = pyramid[-1].shape[:2]
        if n_levels is None and min(h, w) // 2 < min_level_size:
            break
        if min(h, w) < 2:
            break
        pyramid.append(downsample_2x(pyramid[-1]))

    levels = []
    for level, image in enumerate(pyramid):
        info = LevelInfo(level=level, width=image.shape[1], height=image.shape[0],
                         tile_size=tile_size, downsample=2**level)
        rows, cols = _tile_grid(info)
        for r in range(rows):
            for c in range(cols):
                tile = image[r * tile_size:(r + 1) * tile_size, c * tile_size:(c + 1) * tile_size]
                _write_png(root / tile_name(level, r, c), np.ascontiguousarray(tile))
        levels.append(info)

    manifest = SlideManifest(
        format_version=FORMAT_VERSION,
        width=rgb.shape[1],
        height=rgb.shape[0],
        mpp=mpp,
        tile_size=tile_size,
        levels=levels,
        label=label,
    )
    _write_manifest(root, manifest)
    logger.info("Wrote slide %s — %dx%d, %d levels", root.name, rgb.shape[1], rgb.shape[0], len(levels))
    return SlidePackage(root=root, manifest=manifest)


def write_stain_record(slide: SlidePackage, record: StainRecord) -> SlidePackage:
    """Persist an optimized decomposition matrix into the slide manifest."""
    manifest = slide.manifest.model_copy(update={"stain_matrix": record})
    _write_manifest(slide.root, manifest)
    return SlidePackage(root=slide.root, manifest=manifest)


# ---------------------------------------------------------------------------
# Opening
# ---------------------------------------------------------------------------

def open_slide(path: str | Path) -> SlidePackage:
    """Parse and validate a slide package.

    Raises:
        ValueError: "invalid package" for a missing/corrupt manifest or missing
            tiles (all listed), "manifest mismatch" for inconsistent dimensions.
    """
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ValueError(f"invalid package: {root} has no {MANIFEST_NAME}")
    try:
        manifest = SlideManifest.model_validate(json.loads(manifest_path.read_text(encoding="utf-8")))
    except (json.JSONDecodeError, ValidationError) as e:
        raise ValueError(f"invalid package: corrupt manifest in {root}: {e}") from e

    if not manifest.levels:
        raise ValueError(f"manifest mismatch: {root} declares no levels")
    expected_w, expected_h = manifest.width, manifest.height
    for i, info in enumerate(manifest.levels):
        if info.level != i or info.downsample != 2**i:
            raise ValueError(f"manifest mismatch: level {i} has index {info.level}, downsample {info.downsample}")
        if (info.width, info.height) != (expected_w, expected_h):
            raise ValueError(
                f"manifest mismatch: level {i} is {info.width}x{info.height}, "
                f"expected {expected_w}x{expected_h}"
            )
        expected_w, expected_h = expected_w // 2, expected_h // 2

    missing = []
    for info in manifest.levels:
        rows, cols = _tile_grid(info)
        for r in range(rows):
            for c in range(cols):
                name = tile_name(info.level, r, c)
                if not (root / name).is_file():
                    missing.append(name)
    if missing:
        raise ValueError(f"invalid package: missing tiles: {', '.join(missing)}")

    return SlidePackage(root=root, manifest=manifest)


# ---------------------------------------------------------------------------
# Region access
# ---------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _load_tile(path: str, mtime_ns: int) -> np.ndarray:
    with Image.open(path) as img:
        tile = np.asarray(img.convert("RGB"), dtype=np.uint8)
    tile.setflags(write=False)
    return tile


def _tile(slide: SlidePackage, level: int, row: int, col: int) -> np.ndarray:
    path = slide.root / tile_name(level, row, col)
    return _load_tile(str(path), path.stat().st_mtime_ns)


def read_region(slide: SlidePackage, level: int, x: int, y: int, w: int, h: int) -> np.ndarray:
    """Pixel-exact RGB mosaic of a level region; out-of-bounds regions are an error."""
    info = slide.level_info(level)
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > info.width or y + h > info.height:
        raise ValueError(
            f"region out of bounds: ({x}, {y}, {w}, {h}) on level {level} "
            f"of size {info.width}x{info.height}"
        )
    ts = info.tile_size
    out = np.empty((h, w, 3), dtype=np.uint8)
    for row in range(y // ts, (y + h - 1) // ts + 1):
        for col in range(x // ts, (x + w - 1) // ts + 1):
            tile = _tile(slide, level, row, col)
            ty0, tx0 = row * ts, col * ts
            y0, y1 = max(y, ty0), min(y + h, ty0 + tile.shape[0])
            x0, x1 = max(x, tx0), min(x + w, tx0 + tile.shape[1])
            out[y0 - y:y1 - y, x0 - x:x1 - x] = tile[y0 - ty0:y1 - ty0, x0 - tx0:x1 - tx0]
    return out


def read_level(slide: SlidePackage, level: int) -> np.ndarray:
    info = slide.level_info(level)
    return read_region(slide, level, 0, 0, info.width, info.height)


def sample_pixels(
    slide: SlidePackage, mask: TissueMask, n: int, seed: int, level: int = 0
) -> np.ndarray:
    """``n`` RGB pixels of ``level`` drawn uniformly from tumor-labeled mask area.

    Returns an (n, 3) uint8 array; tiles are read once each.

    Raises:
        ValueError: the mask does not match its level, or holds no tumor.
    """
    coords = _tumor_coordinates(slide, mask, level, n, seed)
    ys, xs = coords[:, 0], coords[:, 1]
    ts = slide.level_info(level).tile_size
    tile_rows, tile_cols = ys // ts, xs // ts
    out = np.empty((len(ys), 3), dtype=np.uint8)
    keys = tile_rows * 1_000_000 + tile_cols
    for key in np.unique(keys):
        sel = keys == key
        row, col = int(key // 1_000_000), int(key % 1_000_000)
        tile = _tile(slide, level, row, col)
        out[sel] = tile[ys[sel] - row * ts, xs[sel] - col * ts]
    return out


def _scale(slide: SlidePackage, mask: TissueMask, level: int) -> int:
    """Pixels of ``level`` per mask pixel along each axis.

    The mask must cover its own level exactly; every mask-pixel footprint
    then lies inside the finer level.
    """
    mask_info = slide.level_info(mask.level)
    if (mask.height, mask.width) != (mask_info.height, mask_info.width):
        raise ValueError(
            f"mask shape {mask.height}x{mask.width} does not match level {mask.level} "
            f"({mask_info.height}x{mask_info.width})"
        )
    ratio = mask_info.downsample // slide.level_info(level).downsample
    if ratio < 1:
        raise ValueError(f"mask level {mask.level} is finer than level {level}")
    return ratio


def _tumor_coordinates(
    slide: SlidePackage, mask: TissueMask, level: int, n: int, seed: int
) -> np.ndarray:
    """(row, col) level coordinates, uniform within the footprints of tumor mask pixels."""
    f = _scale(slide, mask, level)
    mys, mxs = np.nonzero(mask.labels == 1)
    if mys.size == 0:
        raise ValueError("no tumor region")
    rng = np.random.default_rng(seed)
    pick = rng.integers(0, mys.size, size=n)
    rows = mys[pick] * f + rng.integers(0, f, size=n)
    cols = mxs[pick] * f + rng.integers(0, f, size=n)
    return np.column_stack([rows, cols])


def sample_patches(
    slide: SlidePackage,
    mask: TissueMask,
    n: int,
    size: int,
    level: int = 0,
    seed: int = 0,
) -> list[Patch]:
    """Sample ``n`` patches (with replacement) whose centers fall on tumor mask pixels.

    A patch centered at (cx, cy) has origin (cx − size//2, cy − size//2).
    Candidate mask pixels are those whose footprint admits a center that keeps
    the patch inside the level.

    Raises:
        ValueError: the patch does not fit the level, the mask does not match
            its level, or no tumor pixel admits a patch.
    """
    info = slide.level_info(level)
    if size > info.width or size > info.height:
        raise ValueError(f"patch size {size} does not fit level {level}")
    f = _scale(slide, mask, level)
    half = size // 2
    lo_x, hi_x = half, info.width - size + half
    lo_y, hi_y = half, info.height - size + half

    mys, mxs = np.nonzero(mask.labels == 1)
    if mys.size == 0:
        raise ValueError("no tumor region")
    # Feasible center interval inside each mask pixel's footprint.
    x0 = np.maximum(mxs * f, lo_x)
    x1 = np.minimum(mxs * f + f - 1, hi_x)
    y0 = np.maximum(mys * f, lo_y)
    y1 = np.minimum(mys * f + f - 1, hi_y)
    feasible = (x0 <= x1) & (y0 <= y1)
    if not feasible.any():
        raise ValueError("no tumor region")
    x0, x1, y0, y1 = x0[feasible], x1[feasible], y0[feasible], y1[feasible]

    rng = np.random.default_rng(seed)
    pick = rng.integers(0, x0.size, size=n)
    cx = x0[pick] + np.floor(rng.random(n) * (x1[pick] - x0[pick] + 1)).astype(np.int64)
    cy = y0[pick] + np.floor(rng.random(n) * (y1[pick] - y0[pick] + 1)).astype(np.int64)

    patches = []
    for px, py in zip(cx - half, cy - half):
        pixels = read_region(slide, level, int(px), int(py), size, size)
        patches.append(Patch(slide_id=slide.slide_id, level=level, x=int(px), y=int(py),
                             size=size, pixels=pixels))
    logger.debug("Sampled %d patches of %d px from %s level %d", n, size, slide.slide_id, level)
    return patches


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def write_mask(mask: TissueMask, path: str | Path) -> Path:
    """Write labels as an 8-bit greyscale PNG; the level travels in a text chunk."""
    labels = np.asarray(mask.labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("mask labels must lie in 0..255")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_png(path, labels.astype(np.uint8), text={"level": str(mask.level)})
    return path


def read_mask(path: str | Path, level: int | None = None) -> TissueMask:
    with Image.open(path) as img:
        labels = np.asarray(img, dtype=np.uint8).copy()
        stored = img.info.get("level")
    if level is None:
        level = int(stored) if stored is not None else 0
    return TissueMask(level=level, labels=labels)


# ---------------------------------------------------------------------------
# Overlays
# ---------------------------------------------------------------------------

def region_outline(mask: np.ndarray, width: int = 2) -> np.ndarray:
    """Inner boundary band of ``width`` pixels of a boolean region."""
    mask = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(mask, iterations=width, border_value=0)
    return mask & ~inner


def render_overlay(
    base: np.ndarray,
    regions: list[OverlayRegion],
    colors: dict[str, tuple[int, int, int]] | None = None,
) -> np.ndarray:
    """Draw 2-pixel region outlines onto a copy of ``base``."""
    colors = {**DEFAULT_COLORS, **(colors or {})}
    out = np.array(base, dtype=np.uint8, copy=True)
    height, width = out.shape[:2]
    for region in regions:
        outline = region_outline(region.mask)
        h, w = outline.shape
        y0, x0 = max(region.y, 0), max(region.x, 0)
        y1, x1 = min(region.y + h, height), min(region.x + w, width)
        if y0 >= y1 or x0 >= x1:
            continue
        local = outline[y0 - region.y:y1 - region.y, x0 - region.x:x1 - region.x]
        color = colors.get(region.label, (255, 0, 0))
        out[y0:y1, x0:x1][local] = color
    return out


def write_overlay(
    slide: SlidePackage,
    level: int,
    regions: list[OverlayRegion],
    path: str | Path,
    colors: dict[str, tuple[int, int, int]] | None = None,
) -> np.ndarray:
    """Render the level with region outlines and write it as PNG."""
    image = render_overlay(read_level(slide, level), regions, colors)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_png(path, image)
    return image


def write_plane(plane: np.ndarray, path: str | Path) -> Path:
    """Write a greyscale or RGB raster as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_png(path, np.ascontiguousarray(plane, dtype=np.uint8))
    return path


def read_image(path: str | Path) -> np.ndarray:
    """Read a PNG/TIFF/JPEG file as an (H, W, 3) uint8 array."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
