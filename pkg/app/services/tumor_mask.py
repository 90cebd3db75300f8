"""K-means tumor-region extraction on the lowest-resolution level.

Pixels are clustered on their L*a*b* chromaticity (a*, b*). Clusters are then
ranked by the mean RGB blue value of their pixels: white background ranks
first, and the cluster ranked second is tumor. The returned label of every
pixel is the blue rank of its cluster, so tumor is always label 1 and the
labels do not depend on how K-means happened to number its clusters.
"""

import logging

import numpy as np

from app.models.slide import SlidePackage, TissueMask
from app.services.colorspace import rgb_to_lab
from app.services.numerics import kmeans
from app.services.slide_io import downsample_2x, read_level

logger = logging.getLogger(__name__)

TUMOR_LABEL = 1


def rank_clusters(rgb_pixels: np.ndarray, assignments: np.ndarray, k: int,
                  weights: np.ndarray | None = None) -> np.ndarray:
    """Map cluster index → rank by descending mean blue (ties: larger population first).

    Returns:
        int array of length k; ``ranks[c]`` is the label of cluster c.
    """
    pixels = np.asarray(rgb_pixels, dtype=np.float64).reshape(-1, 3)
    w = np.ones(pixels.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    population = np.bincount(assignments, weights=w, minlength=k)
    blue_sum = np.bincount(assignments, weights=w * pixels[:, 2], minlength=k)
    blue_mean = np.divide(blue_sum, population, out=np.full(k, -np.inf), where=population > 0)
    order = np.lexsort((-population, -blue_mean))
    ranks = np.empty(k, dtype=np.int64)
    ranks[order] = np.arange(k)
    return ranks


def cluster_labels(rgb: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> np.ndarray:
    """Blue-ranked K-means labels of an (H, W, 3) image clustered on (a*, b*).

    Identical colors are clustered once with their multiplicity as weight.

    Raises:
        ValueError: fewer than k distinct (a*, b*) values.
    """
    if k not in (3, 4):
        raise ValueError(f"k must be 3 or 4, got {k}")
    h, w = rgb.shape[:2]
    colors, inverse, counts = np.unique(
        np.asarray(rgb, dtype=np.uint8).reshape(-1, 3), axis=0,
        return_inverse=True, return_counts=True,
    )
    inverse = inverse.ravel()
    ab = rgb_to_lab(colors.reshape(-1, 1, 3)).reshape(-1, 3)[:, 1:]
    result = kmeans(ab, k, seed=seed, max_iter=max_iter, weights=counts.astype(np.float64))
    ranks = rank_clusters(colors, result.assignments, k, weights=counts)
    return ranks[result.assignments][inverse].reshape(h, w)


def extract_tumor_mask(
    slide: SlidePackage,
    k: int = 3,
    seed: int = 0,
    max_iter: int = 100,
    max_pixels: int = 4_000_000,
) -> TissueMask:
    """Tumor mask of a slide at its lowest pyramid level.

    A lowest level above ``max_pixels`` is box-downsampled for clustering and
    the labels are expanded back by pixel replication.
    """
    level = slide.lowest_level
    rgb = read_level(slide, level)
    h, w = rgb.shape[:2]

    factor = 1
    work = rgb
    while work.shape[0] * work.shape[1] > max_pixels:
        work = downsample_2x(work)
        factor *= 2
    if factor > 1:
        logger.info("Lowest level of %s is %dx%d — clustering at 1/%d", slide.slide_id, w, h, factor)

    labels = cluster_labels(work, k, seed=seed, max_iter=max_iter)
    if factor > 1:
        labels = upsample_mask(labels, factor, (h, w))

    mask = TissueMask(level=level, labels=labels.astype(np.uint8))
    logger.info("Tumor mask for %s — k=%d tumor_fraction=%.4f", slide.slide_id, k, mask.tumor_fraction)
    return mask


def upsample_mask(mask: np.ndarray, factor: int, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour expansion of a low-level mask onto a finer grid of ``shape``."""
    out = np.repeat(np.repeat(np.asarray(mask), factor, axis=0), factor, axis=1)
    pad_y, pad_x = max(0, shape[0] - out.shape[0]), max(0, shape[1] - out.shape[1])
    if pad_y or pad_x:
        out = np.pad(out, ((0, pad_y), (0, pad_x)), mode="edge")
    return out[:shape[0], :shape[1]]


def downsample_truth(truth: np.ndarray, factor: int) -> np.ndarray:
    """Majority vote of a boolean level-0 mask over factor×factor blocks (edge blocks padded)."""
    truth = np.asarray(truth, dtype=bool)
    h, w = truth.shape
    hh, ww = -(-h // factor), -(-w // factor)
    padded = np.zeros((hh * factor, ww * factor), dtype=np.float64)
    padded[:h, :w] = truth
    counts = np.ones_like(padded)
    counts[h:, :] = 0
    counts[:, w:] = 0
    votes = padded.reshape(hh, factor, ww, factor).sum(axis=(1, 3))
    total = counts.reshape(hh, factor, ww, factor).sum(axis=(1, 3))
    return votes * 2 > total


# ---------------------------------------------------------------------------
# Overlap metrics
# ---------------------------------------------------------------------------

def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice coefficient of two boolean masks (1.0 when both are empty)."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two boolean masks (1.0 when both are empty)."""
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union
