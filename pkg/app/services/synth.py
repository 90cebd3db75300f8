"""Synthetic H&E-like slides with exact ground truth.

Slides are painted in stain-density space (hematoxylin, eosin) and rendered
through the forward optical-density model, O = S_h·u + S_e·v. Tissue pixels
are then quantized to 8 bits toward the hematoxylin/eosin plane, so the
stored RGB still carries (almost) no third stain. Geometry is laid out in
microns and converted through the slide's mpp:

- grade3: separated round glands, a white lumen inside a ring of nuclei,
  glands spaced further apart than the nuclei-graph radius
- grade4: a fused epithelial sheet of nuclei with sparse small lumens
- cribriform: one fused gland of 3 or 4 touching lumen rosettes
- benign: stroma only

Stroma nuclei are laid out as fibroblast strands: consecutive nuclei within
the graph radius, all other pairs beyond it.
"""

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.draw import disk, ellipse

from app.models.dataset import DatasetEntry, DatasetManifest
from app.models.slide import SlidePackage
from app.models.synth import (
    CribriformTruth,
    GroundTruth,
    GroundTruthRecord,
    LumenTruth,
    NucleusTruth,
    SynthSpec,
)
from app.services.slide_io import read_image, write_plane, write_slide
from app.services.stain_compute import default_stain_model
from app.utils import derive_seeds, write_json

logger = logging.getLogger(__name__)

# Stain densities (hematoxylin, eosin).
STROMA = (1.0, 2.0)
CYTOPLASM = (0.7, 0.25)
NUCLEUS = (3.1, 0.2)
NUCLEOLUS_BOOST = 1.6
NOISE = 0.015

INK_RGB = (35, 150, 95)

# Geometry in microns.
GRAPH_CLEARANCE_UM = 45.0
SHEET_SPACING_UM = 14.0
ROSETTE_SPACING_UM = 48.0
RING_OFFSET_UM = 5.5
LUMEN_MIN_UM = 7.0
LUMEN_MAX_UM = 8.0
RING_SPACING_UM = 12.5
GLAND_LUMEN_UM = (12.0, 16.0)
GLAND_RING_OFFSET_UM = 9.5
GLAND_RIM_UM = 7.0
GLAND_GAP_UM = 36.0
STRAND_STEP_UM = (20.0, 24.0)
STRAND_CLEARANCE_UM = 34.0
STRAND_TURN = 0.25
STRAND_LENGTH = (4, 9)
STROMA_AREA_PER_NUCLEUS_UM2 = 60.0**2

# Quantization: per-pixel tolerance on |d̄₃·O| and the RGB nudges tried, nearest first.
PLANE_TOLERANCE = 2.5e-4
PLANE_OFFSETS = np.array(
    sorted((o for o in itertools.product(range(-2, 3), repeat=3) if any(o)),
           key=lambda o: (sum(v * v for v in o), o)),
    dtype=np.int16,
)
OD_LOOKUP = -np.log((np.arange(256) + 1.0) / 256.0)

NUCLEOLUS_RATE = {"grade3": 0.1, "grade4": 0.35, "cribriform": 0.2}

DEFAULT_LABELS = {"grade3": "3+3", "grade4": "4+4", "benign": None}

TRUTH_JSON = "ground_truth.json"
TRUTH_TUMOR = "truth_tumor.png"
TRUTH_PATTERN = "truth_pattern.png"
TRUTH_MARKER = "truth_marker.png"
TRUTH_GLANDS = "truth_glands.png"


class _Canvas:
    """Stain-density raster plus the bookkeeping of what was drawn."""

    def __init__(self, spec: SynthSpec):
        self.spec = spec
        self.px = 1.0 / spec.mpp
        self.shape = (spec.height, spec.width)
        self.dens = np.zeros((*self.shape, 2))
        self.tissue = np.zeros(self.shape, dtype=bool)
        self.tumor = np.zeros(self.shape, dtype=bool)
        self.glands = np.zeros(self.shape, dtype=bool)
        self.pattern = np.zeros(self.shape, dtype=np.uint8)
        self.blocked = np.zeros(self.shape, dtype=bool)
        self.nuclei: list[NucleusTruth] = []
        self.lumens: list[LumenTruth] = []
        self.cribriform: list[CribriformTruth] = []

    def um(self, microns: float) -> float:
        return microns * self.px

    def paint_disk(self, x: float, y: float, radius: float, value, into: np.ndarray | None = None):
        rr, cc = disk((y, x), radius, shape=self.shape)
        if into is None:
            self.dens[rr, cc] = value
        else:
            into[rr, cc] = value

    def add_nucleus(self, rng: np.random.Generator, x: float, y: float, angle: float, kind: str,
                    semi_major_um: float = 4.8, semi_minor_um: float = 3.5):
        rate = NUCLEOLUS_RATE.get(kind, 0.0)
        self.nuclei.append(NucleusTruth(
            x=float(x), y=float(y),
            semi_major=self.um(semi_major_um * rng.uniform(0.94, 1.06)),
            semi_minor=self.um(semi_minor_um * rng.uniform(0.94, 1.06)),
            angle=float(angle),
            nucleolus=bool(rng.random() < rate),
        ))


def _ellipse_mask(shape, cy, cx, ry, rx, rotation) -> np.ndarray:
    out = np.zeros(shape, dtype=bool)
    rr, cc = ellipse(cy, cx, ry, rx, shape=shape, rotation=rotation)
    out[rr, cc] = True
    return out


def _pick_position(rng: np.random.Generator, clearance: np.ndarray, needed: float):
    """Random pixel whose clearance (distance to forbidden area) is at least ``needed``."""
    ys, xs = np.nonzero(clearance >= needed)
    if ys.size == 0:
        return None
    i = rng.integers(0, ys.size)
    return float(xs[i]), float(ys[i])


def _jittered_grid(rng, region: np.ndarray, spacing: float, jitter: float) -> list[tuple[float, float]]:
    h, w = region.shape
    points = []
    offset = rng.uniform(0, spacing, size=2)
    for y in np.arange(offset[1], h, spacing):
        for x in np.arange(offset[0], w, spacing):
            jx, jy = x + rng.uniform(-jitter, jitter), y + rng.uniform(-jitter, jitter)
            iy, ix = int(round(jy)), int(round(jx))
            if 0 <= iy < h and 0 <= ix < w and region[iy, ix]:
                points.append((jx, jy))
    return points


# ---------------------------------------------------------------------------
# Tissue components
# ---------------------------------------------------------------------------

def _layout_tissue(canvas: _Canvas, rng: np.random.Generator) -> None:
    h, w = canvas.shape
    cy = h / 2 + rng.uniform(-0.03, 0.03) * h
    cx = w / 2 + rng.uniform(-0.03, 0.03) * w
    canvas.tissue = _ellipse_mask(canvas.shape, cy, cx, 0.44 * h * rng.uniform(0.96, 1.0),
                                  0.44 * w * rng.uniform(0.96, 1.0), rng.uniform(-np.pi, np.pi))
    canvas.dens[canvas.tissue] = STROMA


def _layout_tumor(canvas: _Canvas, rng: np.random.Generator) -> np.ndarray:
    """Paint the tumor blob; returns the boolean grade-4 sub-region."""
    spec = canvas.spec
    h, w = canvas.shape
    blob = _ellipse_mask(
        canvas.shape,
        h / 2 + rng.uniform(-0.03, 0.03) * h,
        w / 2 + rng.uniform(-0.03, 0.03) * w,
        0.28 * h * rng.uniform(0.95, 1.05),
        0.31 * w * rng.uniform(0.95, 1.05),
        rng.uniform(-np.pi, np.pi),
    )
    blob &= ndimage.binary_erosion(canvas.tissue, iterations=8)
    canvas.tumor = blob
    canvas.dens[blob] = CYTOPLASM

    share = spec.grade4_share
    if share is None:
        share = 1.0 if spec.kind == "grade4" else 0.0
    grade4 = np.zeros(canvas.shape, dtype=bool)
    if share >= 1.0:
        grade4 = blob.copy()
    elif share > 0.0:
        theta = rng.uniform(0, 2 * np.pi)
        yy, xx = np.nonzero(blob)
        proj = np.cos(theta) * xx + np.sin(theta) * yy
        cut = np.quantile(proj, share)
        grade4[yy[proj <= cut], xx[proj <= cut]] = True
    canvas.pattern[blob & grade4] = 4
    canvas.pattern[blob & ~grade4] = 3
    return grade4


def _add_ring(canvas: _Canvas, rng: np.random.Generator, x: float, y: float, lumen_r: float,
              kind: str, offset_um: float = RING_OFFSET_UM) -> None:
    """A white lumen ringed by nuclei ``offset_um`` outside its edge."""
    canvas.paint_disk(x, y, lumen_r, (0.0, 0.0))
    ring_r = lumen_r + canvas.um(offset_um)
    n = max(6, int(round(2 * np.pi * ring_r / canvas.um(RING_SPACING_UM))))
    phase = rng.uniform(0, 2 * np.pi)
    for i in range(n):
        phi = phase + 2 * np.pi * i / n + rng.normal(0, 0.02)
        rho = ring_r + rng.uniform(-1.0, 1.0) * canvas.px
        canvas.add_nucleus(rng, x + rho * np.cos(phi), y + rho * np.sin(phi),
                           phi + np.pi / 2, kind, semi_major_um=4.2, semi_minor_um=3.6)


def _layout_cribriform(canvas: _Canvas, rng: np.random.Generator) -> None:
    """One fused gland made of 3 or 4 touching lumen rosettes."""
    n = int(rng.integers(3, 5))
    side = canvas.um(ROSETTE_SPACING_UM)
    circumradius = side / (2 * np.sin(np.pi / n))
    radius = circumradius + canvas.um(LUMEN_MAX_UM + RING_OFFSET_UM + 6.0)
    clearance = ndimage.distance_transform_edt(canvas.tumor)
    pos = _pick_position(rng, clearance, radius + canvas.um(6.0))
    if pos is None:
        logger.warning("No room for a cribriform gland in slide seed=%d", canvas.spec.seed)
        return
    gx, gy = pos

    gland = np.zeros(canvas.shape, dtype=bool)
    canvas.paint_disk(gx, gy, radius, True, into=gland)
    canvas.pattern[gland & canvas.tumor] = 4
    canvas.glands |= gland

    lumen_idx = []
    rotation = rng.uniform(0, 2 * np.pi)
    for i in range(n):
        phi = rotation + 2 * np.pi * i / n
        x, y = gx + circumradius * np.cos(phi), gy + circumradius * np.sin(phi)
        lumen_r = canvas.um(rng.uniform(LUMEN_MIN_UM, LUMEN_MAX_UM))
        lumen_idx.append(len(canvas.lumens))
        canvas.lumens.append(LumenTruth(x=x, y=y, radius=lumen_r, kind="cribriform"))
        _add_ring(canvas, rng, x, y, lumen_r, "cribriform")

    canvas.paint_disk(gx, gy, radius + canvas.um(GRAPH_CLEARANCE_UM), True, into=canvas.blocked)
    canvas.cribriform.append(CribriformTruth(x=gx, y=gy, radius=radius, lumens=lumen_idx))


def _layout_sheet(canvas: _Canvas, rng: np.random.Generator, grade4: np.ndarray) -> None:
    region = grade4 & ~canvas.blocked
    if not region.any():
        return
    clearance = ndimage.distance_transform_edt(region)
    n_lumens = max(1, int(region.sum() / canvas.um(120.0) ** 2))
    holes: list[tuple[float, float, float]] = []
    for _ in range(n_lumens * 20):
        if len(holes) >= n_lumens:
            break
        r = canvas.um(rng.uniform(5.0, 7.0))
        pos = _pick_position(rng, clearance, r + canvas.um(4.0))
        if pos is None:
            break
        x, y = pos
        if all(np.hypot(x - hx, y - hy) >= r + hr + canvas.um(30.0) for hx, hy, hr in holes):
            holes.append((x, y, r))

    nuclei_zone = region & (clearance >= canvas.um(3.0))
    for x, y, r in holes:
        canvas.paint_disk(x, y, r + canvas.um(5.0), False, into=nuclei_zone)
    for x, y in _jittered_grid(rng, nuclei_zone, canvas.um(SHEET_SPACING_UM), canvas.um(1.5)):
        canvas.add_nucleus(rng, x, y, rng.uniform(-np.pi, np.pi), "grade4",
                           semi_major_um=4.5, semi_minor_um=3.5)
    for x, y, r in holes:
        canvas.paint_disk(x, y, r, (0.0, 0.0))
        canvas.lumens.append(LumenTruth(x=x, y=y, radius=r, kind="sheet"))

    canvas.glands |= region
    buffer = ndimage.distance_transform_edt(~region) <= canvas.um(GRAPH_CLEARANCE_UM)
    canvas.blocked |= buffer


def _layout_glands(canvas: _Canvas, rng: np.random.Generator, grade4: np.ndarray) -> None:
    """Separated single-lumen glands.

    Rings of neighbouring glands stay ``GLAND_GAP_UM`` apart, beyond the
    nuclei-graph radius, so every gland is its own graph component.
    """
    region = canvas.tumor & ~grade4 & ~canvas.blocked
    if not region.any():
        return
    clearance = ndimage.distance_transform_edt(region)
    gap = canvas.um(GLAND_GAP_UM) + 2 * canvas.px
    rim = canvas.um(GLAND_RIM_UM)
    glands: list[tuple[float, float, float, float]] = []
    for _ in range(int(600 * canvas.spec.gland_density)):
        lumen_r = canvas.um(rng.uniform(*GLAND_LUMEN_UM))
        ring_r = lumen_r + canvas.um(GLAND_RING_OFFSET_UM)
        pos = _pick_position(rng, clearance, ring_r + rim + canvas.um(2.0))
        if pos is None:
            break
        x, y = pos
        if all(np.hypot(x - gx, y - gy) >= ring_r + gr + gap for gx, gy, gr, _ in glands):
            glands.append((x, y, ring_r, lumen_r))

    for x, y, ring_r, lumen_r in glands:
        canvas.lumens.append(LumenTruth(x=x, y=y, radius=lumen_r, kind="gland"))
        canvas.paint_disk(x, y, ring_r + rim, True, into=canvas.glands)
        _add_ring(canvas, rng, x, y, lumen_r, "grade3", offset_um=GLAND_RING_OFFSET_UM)


def _clear_of(points: np.ndarray, x: float, y: float, distance: float) -> bool:
    if points.size == 0:
        return True
    return bool(np.min(np.hypot(points[:, 0] - x, points[:, 1] - y)) >= distance)


def _layout_stroma_strands(canvas: _Canvas, rng: np.random.Generator) -> None:
    """Fibroblast strands in the stroma.

    Each step is shorter than the graph radius and every other pair of nuclei
    is further apart than ``STRAND_CLEARANCE_UM``, so strand nuclei have at
    most two neighbours and a clustering coefficient of 0.
    """
    zone = canvas.tissue & ~canvas.tumor
    zone &= ndimage.binary_erosion(canvas.tissue, iterations=int(canvas.um(8.0)) or 1)
    ys, xs = np.nonzero(zone)
    if ys.size == 0:
        return
    h, w = canvas.shape
    clearance = canvas.um(STRAND_CLEARANCE_UM)
    placed = np.array([(n.x, n.y) for n in canvas.nuclei]).reshape(-1, 2)
    target = int(zone.sum() / (STROMA_AREA_PER_NUCLEUS_UM2 * canvas.px**2))
    n_placed = 0
    for _ in range(target * 4):
        if n_placed >= target:
            break
        i = rng.integers(0, ys.size)
        x, y = float(xs[i]), float(ys[i])
        if not _clear_of(placed, x, y, clearance):
            continue
        heading = rng.uniform(-np.pi, np.pi)
        strand = [(x, y, heading)]
        length = int(rng.integers(*STRAND_LENGTH))
        while len(strand) < length:
            heading += rng.uniform(-STRAND_TURN, STRAND_TURN)
            step = canvas.um(rng.uniform(*STRAND_STEP_UM))
            px, py, _ = strand[-1]
            nx_, ny_ = px + step * np.cos(heading), py + step * np.sin(heading)
            iy, ix = int(round(ny_)), int(round(nx_))
            if not (0 <= iy < h and 0 <= ix < w and zone[iy, ix]):
                break
            earlier = np.array([(sx, sy) for sx, sy, _ in strand[:-1]]).reshape(-1, 2)
            if not (_clear_of(placed, nx_, ny_, clearance) and _clear_of(earlier, nx_, ny_, clearance)):
                break
            strand.append((nx_, ny_, heading))
        if len(strand) < 3:
            continue
        for sx, sy, angle in strand:
            canvas.add_nucleus(rng, sx, sy, angle, "stroma", semi_major_um=6.0, semi_minor_um=2.6)
        placed = np.vstack([placed, [(sx, sy) for sx, sy, _ in strand]])
        n_placed += len(strand)


def _paint_nuclei(canvas: _Canvas) -> None:
    for nucleus in canvas.nuclei:
        rr, cc = ellipse(nucleus.y, nucleus.x, nucleus.semi_minor, nucleus.semi_major,
                         shape=canvas.shape, rotation=nucleus.angle)
        canvas.dens[rr, cc] = NUCLEUS
        if nucleus.nucleolus:
            rr, cc = disk((nucleus.y, nucleus.x), canvas.um(1.8), shape=canvas.shape)
            canvas.dens[rr, cc, 0] = NUCLEUS[0] + NUCLEOLUS_BOOST


def _marker_mask(canvas: _Canvas, rng: np.random.Generator) -> np.ndarray:
    """A thick ink arc drawn around the tumor, outside it."""
    ink = np.zeros(canvas.shape, dtype=bool)
    ys, xs = np.nonzero(canvas.tumor) if canvas.tumor.any() else np.nonzero(canvas.tissue)
    cy, cx = ys.mean(), xs.mean()
    radius = 0.5 * max(np.ptp(ys), np.ptp(xs)) + canvas.um(25.0)
    start = rng.uniform(0, 2 * np.pi)
    thickness = canvas.um(6.0)
    for phi in np.linspace(start, start + np.pi, int(np.pi * radius / 2) + 2):
        rr, cc = disk((cy + radius * np.sin(phi), cx + radius * np.cos(phi)), thickness,
                      shape=canvas.shape)
        ink[rr, cc] = True
    return ink & ~canvas.tumor


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------

def render_stain_densities(spec: SynthSpec) -> tuple[np.ndarray, GroundTruth]:
    """Lay out the slide and return (densities (H, W, 2) before noise, ground truth)."""
    rng = np.random.default_rng(spec.seed)
    canvas = _Canvas(spec)
    _layout_tissue(canvas, rng)
    if spec.kind != "benign":
        grade4 = _layout_tumor(canvas, rng)
        if spec.cribriform:
            _layout_cribriform(canvas, rng)
        _layout_sheet(canvas, rng, grade4)
        _layout_glands(canvas, rng, grade4)
    _layout_stroma_strands(canvas, rng)
    _paint_nuclei(canvas)

    marker = _marker_mask(canvas, rng) if spec.marker else np.zeros(canvas.shape, dtype=bool)
    truth = GroundTruth(
        label=spec.label if spec.label is not None else DEFAULT_LABELS[spec.kind],
        kind=spec.kind,
        mpp=spec.mpp,
        tumor=canvas.tumor,
        pattern=canvas.pattern,
        marker=marker,
        glands=canvas.glands,
        nuclei=canvas.nuclei,
        lumens=canvas.lumens,
        cribriform=canvas.cribriform,
    )
    return canvas.dens, truth


def quantize_to_stain_plane(intensity: np.ndarray, normal: np.ndarray, where: np.ndarray) -> np.ndarray:
    """Round float intensities to 8 bits, keeping ``where`` pixels on the stain plane.

    Plain rounding moves a pixel's OD off the plane ``normal·O = 0`` by up to
    half a level per channel, which is large for dark pixels. Each ``where``
    pixel instead takes the nearest RGB within ±2 levels per channel whose
    residual |normal·O| is at most ``PLANE_TOLERANCE``, or the smallest
    residual found.
    """
    rgb = np.clip(np.rint(intensity), 0, 255).astype(np.int16)
    pixels = rgb[where]
    normal = np.asarray(normal, dtype=np.float64)
    best = pixels.copy()
    residual = np.abs(OD_LOOKUP[best] @ normal)
    pending = np.nonzero(residual > PLANE_TOLERANCE)[0]
    for offset in PLANE_OFFSETS:
        if pending.size == 0:
            break
        candidate = np.clip(pixels[pending] + offset, 0, 255)
        r = np.abs(OD_LOOKUP[candidate] @ normal)
        better = r < residual[pending]
        idx = pending[better]
        best[idx] = candidate[better]
        residual[idx] = r[better]
        pending = pending[residual[pending] > PLANE_TOLERANCE]
    rgb[where] = best
    return rgb.astype(np.uint8)


def render_synthetic(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray, GroundTruth]:
    """Render a slide to RGB.

    Returns (rgb uint8 (H, W, 3), float optical density before quantization,
    ground truth). Noise is added in stain-density space inside the tissue
    only, so background stays pure white and every OD pixel lies in the
    span of the hematoxylin and eosin vectors; quantization keeps it there.
    """
    dens, truth = render_stain_densities(spec)
    noise_rng = np.random.default_rng([spec.seed, 1])
    tissue = dens.any(axis=2) | truth.lumen_mask()
    noisy = dens.copy()
    noise = noise_rng.uniform(-NOISE, NOISE, size=dens.shape)
    noisy[tissue] += noise[tissue]
    noisy = np.clip(noisy, 0.0, None)

    model = default_stain_model()
    od = noisy[..., 0:1] * model.u + noisy[..., 1:2] * model.v
    rgb = quantize_to_stain_plane(256.0 * np.exp(-od) - 1.0, model.D_bar[2], tissue)
    if truth.marker.any():
        jitter = noise_rng.integers(-3, 4, size=(int(truth.marker.sum()), 3))
        rgb[truth.marker] = np.clip(np.array(INK_RGB) + jitter, 0, 255).astype(np.uint8)
    return rgb, od, truth


def save_ground_truth(truth: GroundTruth, root: str | Path) -> None:
    root = Path(root)
    write_plane(truth.tumor.astype(np.uint8) * 255, root / TRUTH_TUMOR)
    write_plane(truth.pattern, root / TRUTH_PATTERN)
    write_plane(truth.glands.astype(np.uint8) * 255, root / TRUTH_GLANDS)
    if truth.marker.any():
        write_plane(truth.marker.astype(np.uint8) * 255, root / TRUTH_MARKER)
    (root / TRUTH_JSON).write_text(truth.to_record().model_dump_json(indent=2) + "\n",
                                   encoding="utf-8")


def load_ground_truth(root: str | Path) -> GroundTruth:
    root = Path(root)
    record = GroundTruthRecord.model_validate_json((root / TRUTH_JSON).read_text(encoding="utf-8"))
    tumor = read_image(root / TRUTH_TUMOR)[..., 0] > 127
    pattern = read_image(root / TRUTH_PATTERN)[..., 0]
    glands = read_image(root / TRUTH_GLANDS)[..., 0] > 127
    marker_path = root / TRUTH_MARKER
    marker = read_image(marker_path)[..., 0] > 127 if marker_path.is_file() else np.zeros_like(tumor)
    return GroundTruth(
        label=record.label, kind=record.kind, mpp=record.mpp, tumor=tumor, pattern=pattern,
        marker=marker, glands=glands, nuclei=record.nuclei, lumens=record.lumens,
        cribriform=record.cribriform,
    )


def synth_slide(spec: SynthSpec, root: str | Path, tile_size: int = 512) -> tuple[SlidePackage, GroundTruth]:
    """Render a slide and write it, with its ground truth, as a package at ``root``."""
    rgb, _, truth = render_synthetic(spec)
    slide = write_slide(root, rgb, mpp=spec.mpp, label=truth.label, tile_size=tile_size)
    save_ground_truth(truth, root)
    logger.info(
        "Synthetic slide %s — kind=%s label=%s nuclei=%d lumens=%d cribriform=%d",
        slide.slide_id, spec.kind, truth.label, len(truth.nuclei), len(truth.lumens),
        len(truth.cribriform),
    )
    return slide, truth


def _corpus_specs(n_per_class: int, seed: int, **shape) -> list[tuple[str, str, SynthSpec]]:
    plan = [
        ("train", "3+3", "grade3", None),
        ("train", "4+4", "grade4", None),
        ("eval", "3+4", "grade3", 0.3),
        ("eval", "4+3", "grade4", 0.7),
    ]
    seeds = iter(derive_seeds(seed, n_per_class * len(plan)))
    specs = []
    for split, label, kind, share in plan:
        for i in range(n_per_class):
            name = f"{split}_{label.replace('+', '')}_{i:03d}"
            spec = SynthSpec(kind=kind, grade4_share=share, label=label, seed=next(seeds), **shape)
            specs.append((name, split, spec))
    return specs


def _synth_job(args: tuple[str, SynthSpec, int]) -> str:
    root, spec, tile_size = args
    synth_slide(spec, root, tile_size=tile_size)
    return root


def synth_corpus(
    n_per_class: int,
    out_dir: str | Path,
    seed: int,
    width: int = 1024,
    height: int = 1024,
    mpp: float = 1.0,
    tile_size: int = 512,
    jobs: int = 1,
) -> DatasetManifest:
    """Generate a weak-label corpus and its ``dataset.json`` manifest.

    Training split: ``n_per_class`` slides of each pure pattern (3+3, 4+4).
    Evaluation split: ``n_per_class`` mixtures of each of 3+4 and 4+3, the
    primary pattern covering 70% of the tumor.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    out_dir = Path(out_dir)
    specs = _corpus_specs(n_per_class, seed, width=width, height=height, mpp=mpp)
    jobs_args = [(str(out_dir / "slides" / name), spec, tile_size) for name, _, spec in specs]

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(_synth_job, jobs_args))
    else:
        for args in jobs_args:
            _synth_job(args)

    manifest = DatasetManifest(entries=[
        DatasetEntry(slide_path=f"slides/{name}", label=spec.label, split=split)
        for name, split, spec in specs
    ])
    write_json(out_dir / "dataset.json", manifest.model_dump())
    logger.info("Synthetic corpus written to %s — %d slides", out_dir, len(specs))
    return manifest
