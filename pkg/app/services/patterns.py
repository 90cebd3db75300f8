"""Prognosis-pattern detectors: prominent nucleoli and cribriform glands.

Nucleoli: a two-mode intensity mixture is fitted inside every nucleus; the
dark mode is the nucleolus, and it is prominent when it sits far enough
below the light mode and holds a minimum share of the nucleus.

Cribriform: nuclei with the highest clustering coefficients (top mode of a
three-mode mixture) mark tumor glands. Their convex hulls, dilated by a
margin in microns, are merged into gland regions, and a region holding
several round lumens is reported as cribriform.
"""

import logging

import networkx as nx
import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError
from skimage.draw import line, polygon
from skimage.measure import label, perimeter, regionprops

from app.models.nuclei import NucleiGraph, NucleusRecord
from app.models.patterns import CribriformRegion, LumenCandidate, NucleoliFlag, TumorSubgraph
from app.services.numerics import gmm_assign, gmm_em_1d
from app.services.nuclei import clustering_coefficients
from app.services.tumor_mask import iou

logger = logging.getLogger(__name__)

MIN_NUCLEUS_PIXELS = 16

# Mixture variance floor over clustering coefficients, relative to their sample variance.
COEFFICIENT_VAR_FLOOR_RATIO = 1e-2


# ---------------------------------------------------------------------------
# Prominent nucleoli
# ---------------------------------------------------------------------------

def nucleus_flag(
    nucleus_id: int,
    intensities: np.ndarray,
    separation: float = 50.0,
    min_dark_weight: float = 0.05,
) -> NucleoliFlag:
    """Two-mode fit of one nucleus' pixel intensities (dark = dense)."""
    values = np.asarray(intensities, dtype=np.float64).ravel()
    if values.size < MIN_NUCLEUS_PIXELS:
        return NucleoliFlag(nucleus_id=nucleus_id, prominent=False, dark_mean=float("nan"),
                            light_mean=float("nan"), separation=0.0, dark_weight=0.0,
                            status="insufficient")
    model = gmm_em_1d(np.sort(values), 2)
    if model.degenerate:
        mean = float(model.means[0])
        return NucleoliFlag(nucleus_id=nucleus_id, prominent=False, dark_mean=mean,
                            light_mean=mean, separation=0.0, dark_weight=1.0, status="degenerate")
    dark, light = float(model.means[0]), float(model.means[1])
    weight = float(model.weights[0])
    gap = light - dark
    return NucleoliFlag(
        nucleus_id=nucleus_id,
        prominent=bool(gap >= separation and weight >= min_dark_weight),
        dark_mean=dark,
        light_mean=light,
        separation=gap,
        dark_weight=weight,
    )


def detect_prominent_nucleoli(
    nuclei: list[NucleusRecord],
    intensity: np.ndarray,
    separation: float = 50.0,
    min_dark_weight: float = 0.05,
    origin: tuple[int, int] = (0, 0),
) -> list[NucleoliFlag]:
    """Flag nuclei with a prominent nucleolus.

    ``intensity`` is the hematoxylin plane as transmitted intensity (dense
    stain = dark) and ``origin`` its top-left (x, y) in the nuclei frame.
    """
    plane = np.asarray(intensity)
    ox, oy = origin
    flags = []
    for nucleus in nuclei:
        rows = nucleus.pixels[:, 0] - oy
        cols = nucleus.pixels[:, 1] - ox
        flags.append(nucleus_flag(nucleus.id, plane[rows, cols], separation, min_dark_weight))
    n_prominent = sum(f.prominent for f in flags)
    logger.info("Nucleoli: %d of %d nuclei prominent (separation=%g)",
                n_prominent, len(flags), separation)
    return flags


# ---------------------------------------------------------------------------
# Tumor subgraph
# ---------------------------------------------------------------------------

def select_top_mode(
    values: dict[int, float],
    n_modes: int = 3,
    var_floor_ratio: float = COEFFICIENT_VAR_FLOOR_RATIO,
) -> TumorSubgraph:
    """Vertices whose value falls in the highest-mean occupied mode of an EM mixture.

    Coefficients of small-degree vertices repeat exactly (0, 0.5, 1); the
    variance floor keeps such repeats from collapsing a mode onto a handful
    of vertices.
    """
    ids = sorted(values, key=lambda v: (values[v], v))
    x = np.array([values[v] for v in ids], dtype=np.float64)
    model = gmm_em_1d(x, n_modes, var_floor_ratio=var_floor_ratio)
    if model.degenerate:
        logger.warning("Clustering coefficients are all equal — returning every eligible vertex")
        return TumorSubgraph(vertices=frozenset(ids), degenerate=True, model=model)
    assigned = gmm_assign(x, model)
    top = assigned.max()
    return TumorSubgraph(
        vertices=frozenset(v for v, a in zip(ids, assigned) if a == top),
        degenerate=False,
        model=model,
    )


def tumor_subgraph(graph: NucleiGraph, min_vertices: int = 10) -> TumorSubgraph:
    """Vertices of the highest clustering-coefficient mode among vertices of degree ≥ 2."""
    coefficients = graph.coefficients if graph.coefficients is not None else clustering_coefficients(graph)
    eligible = {v: coefficients[v] for v in graph.vertices if graph.graph.degree[v] >= 2}
    if len(eligible) < min_vertices:
        raise ValueError(
            f"insufficient graph: {len(eligible)} vertices with degree >= 2, need {min_vertices}"
        )
    subgraph = select_top_mode(eligible)
    logger.info("Tumor subgraph: %d of %d eligible vertices", len(subgraph.vertices), len(eligible))
    return subgraph


def _hull_mask(points: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Filled convex hull of (x, y) points; collinear sets rasterize as segments."""
    mask = np.zeros(shape, dtype=bool)
    rounded = np.rint(points).astype(np.int64)
    rounded[:, 0] = np.clip(rounded[:, 0], 0, shape[1] - 1)
    rounded[:, 1] = np.clip(rounded[:, 1], 0, shape[0] - 1)
    mask[rounded[:, 1], rounded[:, 0]] = True
    if len(points) >= 3:
        try:
            hull = ConvexHull(points)
        except QhullError:
            hull = None
        if hull is not None:
            xy = points[hull.vertices]
            rr, cc = polygon(xy[:, 1], xy[:, 0], shape=shape)
            mask[rr, cc] = True
            return mask
    order = np.lexsort((rounded[:, 1], rounded[:, 0]))
    for a, b in zip(order[:-1], order[1:]):
        rr, cc = line(rounded[a, 1], rounded[a, 0], rounded[b, 1], rounded[b, 0])
        mask[rr, cc] = True
    return mask


def gland_regions(
    graph: NucleiGraph,
    vertices: frozenset[int],
    shape: tuple[int, int],
    dilation_px: float,
    origin: tuple[int, int] = (0, 0),
) -> list[tuple[np.ndarray, list[int]]]:
    """Pixel regions of the subgraph: dilated convex hull per connected component.

    Overlapping dilated hulls are merged. Returns (boolean mask of ``shape``,
    sorted member vertex ids) per region, ordered by smallest member id.
    """
    ox, oy = origin
    union = np.zeros(shape, dtype=bool)
    sub = graph.graph.subgraph(vertices)
    margin = int(np.ceil(dilation_px)) + 2
    for component in (sorted(c) for c in nx.connected_components(sub)):
        pts = np.array([graph.positions[v] for v in component], dtype=np.float64) - [ox, oy]
        x0 = max(int(np.floor(pts[:, 0].min())) - margin, 0)
        y0 = max(int(np.floor(pts[:, 1].min())) - margin, 0)
        x1 = min(int(np.ceil(pts[:, 0].max())) + margin + 1, shape[1])
        y1 = min(int(np.ceil(pts[:, 1].max())) + margin + 1, shape[0])
        if x0 >= x1 or y0 >= y1:
            continue
        hull = _hull_mask(pts - [x0, y0], (y1 - y0, x1 - x0))
        grown = ndimage.distance_transform_edt(~hull) <= dilation_px
        union[y0:y1, x0:x1] |= grown

    labels, n = ndimage.label(union, structure=np.ones((3, 3)))
    members: dict[int, list[int]] = {i: [] for i in range(1, n + 1)}
    for v in sorted(vertices):
        x, y = graph.positions[v]
        ix, iy = int(round(x - ox)), int(round(y - oy))
        if 0 <= iy < shape[0] and 0 <= ix < shape[1] and labels[iy, ix]:
            members[int(labels[iy, ix])].append(v)
    regions = [(labels == i, members[i]) for i in range(1, n + 1) if members[i]]
    regions.sort(key=lambda r: r[1][0])
    return regions


# ---------------------------------------------------------------------------
# Lumens
# ---------------------------------------------------------------------------

def roundness(area: float, perimeter: float) -> float:
    """4πa/P²: the region's area over the area of the disk with the same circumference."""
    if area <= 0 or perimeter <= 0:
        raise ValueError("area and perimeter must be > 0")
    return 4.0 * np.pi * area / (perimeter * perimeter)


def contour_perimeter(region: np.ndarray) -> float:
    """Chain length through the boundary pixels of a boolean region.

    Boundary pixels are those with a 4-neighbour outside the region; axis
    steps between them count 1 and diagonal steps √2.
    """
    return float(perimeter(np.asarray(region, dtype=bool), neighborhood=4))


def extract_lumen_candidates(
    rgb: np.ndarray,
    threshold: int = 200,
    min_area: int = 16,
    origin: tuple[int, int] = (0, 0),
) -> list[LumenCandidate]:
    """Hollow regions: 8-connected components with every channel above ``threshold``.

    Components touching the image border are background, not lumens.
    """
    image = np.asarray(rgb)
    bright = image.min(axis=2) > threshold
    components = label(bright, connectivity=2)
    h, w = bright.shape
    ox, oy = origin
    candidates = []
    for region in regionprops(components):
        r0, c0, r1, c1 = region.bbox
        if r0 == 0 or c0 == 0 or r1 == h or c1 == w:
            continue
        if region.area < min_area:
            continue
        length = contour_perimeter(region.image)
        if length <= 0:
            continue
        candidates.append(LumenCandidate(
            area=int(region.area),
            perimeter=length,
            roundness=roundness(region.area, length),
            pixels=region.coords + np.array([oy, ox]),
        ))
    return candidates


# ---------------------------------------------------------------------------
# Cribriform
# ---------------------------------------------------------------------------

def detect_cribriform(
    rgb: np.ndarray,
    graph: NucleiGraph,
    subgraph: TumorSubgraph | None = None,
    origin: tuple[int, int] = (0, 0),
    channel_threshold: int = 200,
    min_roundness: float = 0.7,
    min_lumens: int = 3,
    dilation_um: float = 15.0,
) -> list[CribriformRegion]:
    """Gland regions of the tumor subgraph that hold ``min_lumens`` round lumens.

    ``rgb`` is a level-0 region whose top-left corner is ``origin`` in the
    graph's coordinate frame.
    """
    if subgraph is None:
        try:
            subgraph = tumor_subgraph(graph)
        except ValueError as e:
            logger.warning("No cribriform search: %s", e)
            return []
    shape = rgb.shape[:2]
    ox, oy = origin
    regions = gland_regions(graph, subgraph.vertices, shape, dilation_um / graph.mpp, origin)
    lumens = [
        lm for lm in extract_lumen_candidates(rgb, channel_threshold, origin=origin)
        if lm.roundness >= min_roundness
    ]

    found = []
    for mask, members in regions:
        inside = [lm for lm in lumens if mask[lm.pixels[:, 0] - oy, lm.pixels[:, 1] - ox].any()]
        if len(inside) < min_lumens:
            continue
        rows, cols = np.nonzero(mask)
        y0, y1, x0, x1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
        found.append(CribriformRegion(
            x=int(x0 + ox), y=int(y0 + oy), mask=mask[y0:y1, x0:x1].copy(),
            lumens=inside, vertex_ids=members,
        ))
    logger.info("Cribriform: %d of %d gland regions hold >= %d round lumens",
                len(found), len(regions), min_lumens)
    return found


def region_is_valid(region: CribriformRegion, min_roundness: float = 0.7, min_lumens: int = 3) -> bool:
    """Re-check a reported region: enough lumens, all round, all touching the gland."""
    if len(region.lumens) < min_lumens:
        return False
    h, w = region.mask.shape
    for lumen in region.lumens:
        if lumen.roundness < min_roundness:
            return False
        rows, cols = lumen.pixels[:, 0] - region.y, lumen.pixels[:, 1] - region.x
        ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        if not region.mask[rows[ok], cols[ok]].any():
            return False
    return True


def match_regions(
    detected: list[np.ndarray], truth: list[np.ndarray], min_iou: float = 0.5
) -> tuple[int, int, int]:
    """Greedy one-to-one matching of boolean region masks at ``min_iou``.

    Returns:
        (true positives, detected count, truth count)
    """
    used: set[int] = set()
    hits = 0
    for mask in detected:
        best, best_j = 0.0, None
        for j, ref in enumerate(truth):
            if j in used:
                continue
            score = iou(mask, ref)
            if score > best:
                best, best_j = score, j
        if best_j is not None and best >= min_iou:
            used.add(best_j)
            hits += 1
    return hits, len(detected), len(truth)
