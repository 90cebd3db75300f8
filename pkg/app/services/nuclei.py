"""Nucleus extraction from the hematoxylin plane and the nuclei proximity graph.

Nuclei are found with a fixed threshold on the 8-bit hematoxylin density
image, 8-connected components and an area window given in µm². The graph
joins every pair of nuclei whose centroids lie within a radius in microns.
"""

import logging

import networkx as nx
import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage.measure import label, regionprops

from app.models.nuclei import NucleiGraph, NucleusRecord

logger = logging.getLogger(__name__)


def fill_single_pixel_holes(mask: np.ndarray) -> np.ndarray:
    """Set background pixels that form a 4-connected hole of exactly one pixel."""
    mask = np.asarray(mask, dtype=bool)
    background, n = ndimage.label(~mask)
    if n == 0:
        return mask.copy()
    sizes = np.bincount(background.ravel(), minlength=n + 1)
    # Background components touching the border are outside, not holes.
    border = np.unique(np.concatenate([
        background[0], background[-1], background[:, 0], background[:, -1],
    ]))
    single = sizes == 1
    single[0] = False
    single[border] = False
    return mask | single[background]


def extract_nuclei(
    hema: np.ndarray,
    mpp: float,
    threshold: int = 128,
    min_area_um2: float = 10.0,
    max_area_um2: float = 120.0,
    origin: tuple[int, int] = (0, 0),
) -> list[NucleusRecord]:
    """Detect nuclei in an 8-bit hematoxylin density plane (255 = densest).

    ``origin`` is the (x, y) of the plane's top-left pixel in level-0
    coordinates; centroids and pixel sets are reported in that frame.

    Returns:
        NucleusRecord list in raster order of the components, ids from 0.
    """
    if mpp <= 0:
        raise ValueError("mpp must be > 0")
    plane = np.asarray(hema)
    if plane.ndim != 2:
        raise ValueError(f"hematoxylin plane must be 2-D, got shape {plane.shape}")
    pixel_area = mpp * mpp
    min_px, max_px = min_area_um2 / pixel_area, max_area_um2 / pixel_area

    mask = fill_single_pixel_holes(plane >= threshold)
    components = label(mask, connectivity=2)
    ox, oy = origin
    nuclei: list[NucleusRecord] = []
    for region in regionprops(components):
        if not min_px <= region.area <= max_px:
            continue
        coords = region.coords
        cy, cx = coords.mean(axis=0)
        nuclei.append(NucleusRecord(
            id=len(nuclei),
            x=float(cx + ox),
            y=float(cy + oy),
            area=int(region.area),
            mean_density=float(plane[coords[:, 0], coords[:, 1]].mean()),
            pixels=coords + np.array([oy, ox]),
        ))
    logger.debug("extract_nuclei: %d components, %d within area bounds",
                 int(components.max()), len(nuclei))
    return nuclei


def build_nuclei_graph(
    nuclei: list[NucleusRecord], mpp: float, radius_microns: float = 30.0
) -> NucleiGraph:
    """Undirected graph joining nuclei whose centroids are within ``radius_microns``."""
    if mpp <= 0:
        raise ValueError("mpp must be > 0")
    graph = nx.Graph()
    positions = {n.id: (n.x, n.y) for n in nuclei}
    graph.add_nodes_from(sorted(positions))
    if len(nuclei) > 1:
        ids = np.array(sorted(positions))
        points = np.array([positions[i] for i in ids])
        pairs = cKDTree(points).query_pairs(radius_microns / mpp, output_type="ndarray")
        graph.add_edges_from((int(ids[a]), int(ids[b])) for a, b in pairs)
    logger.debug("Nuclei graph: %d vertices, %d edges at %.1f µm",
                 graph.number_of_nodes(), graph.number_of_edges(), radius_microns)
    return NucleiGraph(graph=graph, radius_microns=radius_microns, mpp=mpp, positions=positions)


def clustering_coefficients(graph: NucleiGraph) -> dict[int, float]:
    """C_i = 2·(edges among neighbours) / (k_i(k_i − 1)); 0 when k_i < 2.

    The result is cached on ``graph.coefficients``.
    """
    coefficients = {int(v): float(c) for v, c in nx.clustering(graph.graph).items()}
    graph.coefficients = coefficients
    return coefficients


def nuclei_table(nuclei: list[NucleusRecord], coefficients: dict[int, float] | None = None) -> pd.DataFrame:
    """Nuclei as rows {id, x, y, area[, clustering]} for CSV export."""
    frame = pd.DataFrame(
        [{"id": n.id, "x": round(n.x, 3), "y": round(n.y, 3), "area": n.area} for n in nuclei],
        columns=["id", "x", "y", "area"],
    )
    if coefficients is not None:
        frame["clustering"] = [round(coefficients.get(n.id, 0.0), 6) for n in nuclei]
    return frame
