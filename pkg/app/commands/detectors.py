"""Nuclei export and the prognosis-pattern detectors."""

import logging

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator

from app.commands import output_dir
from app.config import settings
from app.engine.pipeline import SlidePipeline
from app.models.nuclei import NucleusRecord
from app.models.slide import OverlayRegion, SlidePackage
from app.services.nuclei import build_nuclei_graph, clustering_coefficients, extract_nuclei, nuclei_table
from app.services.patterns import detect_cribriform, detect_prominent_nucleoli, match_regions, tumor_subgraph
from app.services.slide_io import open_slide, read_region, write_overlay
from app.services.stain_compute import hematoxylin_intensity
from app.services.synth import TRUTH_JSON, load_ground_truth

logger = logging.getLogger(__name__)


class DetectorRequest(BaseModel):
    slide: str
    out: str | None = None
    region: tuple[int, int, int, int] | None = None
    seed: int = 0
    k: int = Field(default_factory=lambda: settings.kmeans_k)
    lam: float = Field(default_factory=lambda: settings.stain_lambda, gt=0)
    threshold: int = Field(default_factory=lambda: settings.nucleus_threshold, ge=0, le=255)

    @field_validator("region")
    @classmethod
    def _positive_size(cls, v):
        if v is not None and (v[2] <= 0 or v[3] <= 0):
            raise ValueError("region width and height must be > 0")
        return v


class NucleiRequest(DetectorRequest):
    graph: bool = False


class NucleoliRequest(DetectorRequest):
    separation: float = Field(default_factory=lambda: settings.nucleoli_separation, gt=0)
    min_dark_weight: float = Field(default_factory=lambda: settings.nucleoli_min_dark_weight, ge=0, le=1)


class CribriformRequest(DetectorRequest):
    channel_threshold: int = Field(default_factory=lambda: settings.lumen_channel_threshold, ge=0, le=255)
    min_roundness: float = Field(default_factory=lambda: settings.lumen_min_roundness, gt=0)
    min_lumens: int = Field(default_factory=lambda: settings.cribriform_min_lumens, ge=1)
    truth: bool = False


# ---------------------------------------------------------------------------
# Shared
# ---------------------------------------------------------------------------

def _region(slide: SlidePackage, region: tuple[int, int, int, int] | None) -> tuple[int, int, int, int]:
    return region if region is not None else (0, 0, slide.width, slide.height)


def _nuclei(body: DetectorRequest, slide: SlidePackage) -> tuple[np.ndarray, np.ndarray, list[NucleusRecord], tuple[int, int]]:
    """(level-0 RGB, hematoxylin plane, nuclei, origin) of the requested region."""
    x, y, w, h = _region(slide, body.region)
    pipeline = SlidePipeline(slide, k=body.k, seed=body.seed, lam=body.lam,
                             sample_size=settings.stain_sample_pixels, grad_tol=settings.stain_grad_tol)
    rgb = read_region(slide, 0, x, y, w, h)
    hema = pipeline.hematoxylin(rgb)
    nuclei = extract_nuclei(
        hema, slide.mpp, threshold=body.threshold, min_area_um2=settings.nucleus_min_area_um2,
        max_area_um2=settings.nucleus_max_area_um2, origin=(x, y),
    )
    return rgb, hema, nuclei, (x, y)


def _nucleus_outline(nucleus: NucleusRecord, label: str) -> OverlayRegion:
    rows, cols = nucleus.pixels[:, 0], nucleus.pixels[:, 1]
    y0, x0 = int(rows.min()), int(cols.min())
    mask = np.zeros((int(rows.max()) - y0 + 1, int(cols.max()) - x0 + 1), dtype=bool)
    mask[rows - y0, cols - x0] = True
    return OverlayRegion(label, x0, y0, mask)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def run_nuclei(body: NucleiRequest) -> dict:
    """Export nuclei as ``nuclei.csv``; with ``graph`` add per-vertex clustering coefficients."""
    slide = open_slide(body.slide)
    out = output_dir(body.out, "nuclei")
    _, _, nuclei, _ = _nuclei(body, slide)
    result = {"slide": slide.slide_id, "n_nuclei": len(nuclei)}
    coefficients = None
    if body.graph:
        graph = build_nuclei_graph(nuclei, slide.mpp, settings.graph_radius_um)
        coefficients = clustering_coefficients(graph)
        result["n_edges"] = graph.graph.number_of_edges()
        result["mean_clustering"] = round(float(np.mean(list(coefficients.values()))), 6) \
            if coefficients else 0.0
    nuclei_table(nuclei, coefficients).to_csv(out / "nuclei.csv", index=False)
    return {"status": "complete", **result, "table": str(out / "nuclei.csv")}


def run_nucleoli(body: NucleoliRequest) -> dict:
    """Flag nuclei with a prominent nucleolus; writes ``nucleoli.csv`` and an overlay."""
    slide = open_slide(body.slide)
    out = output_dir(body.out, "nucleoli")
    _, hema, nuclei, origin = _nuclei(body, slide)
    flags = detect_prominent_nucleoli(
        nuclei, hematoxylin_intensity(hema), separation=body.separation,
        min_dark_weight=body.min_dark_weight, origin=origin,
    )
    frame = pd.DataFrame(
        [{"id": f.nucleus_id, "prominent": f.prominent, "status": f.status,
          "dark_mean": round(f.dark_mean, 4), "light_mean": round(f.light_mean, 4),
          "separation": round(f.separation, 4), "dark_weight": round(f.dark_weight, 6)}
         for f in flags],
        columns=["id", "prominent", "status", "dark_mean", "light_mean", "separation", "dark_weight"],
    )
    frame.to_csv(out / "nucleoli.csv", index=False)
    by_id = {n.id: n for n in nuclei}
    outlines = [_nucleus_outline(by_id[f.nucleus_id], "nucleoli") for f in flags if f.prominent]
    write_overlay(slide, 0, outlines, out / "nucleoli_overlay.png")
    return {
        "status": "complete",
        "slide": slide.slide_id,
        "n_nuclei": len(nuclei),
        "n_prominent": sum(f.prominent for f in flags),
        "table": str(out / "nucleoli.csv"),
    }


def run_cribriform(body: CribriformRequest) -> dict:
    """Detect cribriform glands; with ``truth`` score them against the synthetic ground truth."""
    slide = open_slide(body.slide)
    out = output_dir(body.out, "cribriform")
    rgb, _, nuclei, origin = _nuclei(body, slide)
    graph = build_nuclei_graph(nuclei, slide.mpp, settings.graph_radius_um)
    clustering_coefficients(graph)
    try:
        subgraph = tumor_subgraph(graph)
    except ValueError as e:
        logger.warning("No cribriform search on %s: %s", slide.slide_id, e)
        subgraph = None
    regions = [] if subgraph is None else detect_cribriform(
        rgb, graph, subgraph, origin=origin, channel_threshold=body.channel_threshold,
        min_roundness=body.min_roundness, min_lumens=body.min_lumens,
        dilation_um=settings.gland_dilation_um,
    )

    frame = pd.DataFrame(
        [{"region": i, "x": r.x, "y": r.y, "area": r.area, "n_lumens": len(r.lumens),
          "min_roundness": round(min(lm.roundness for lm in r.lumens), 6)}
         for i, r in enumerate(regions)],
        columns=["region", "x", "y", "area", "n_lumens", "min_roundness"],
    )
    frame.to_csv(out / "cribriform.csv", index=False)
    write_overlay(slide, 0, [OverlayRegion("cribriform", r.x, r.y, r.mask) for r in regions],
                  out / "cribriform_overlay.png")

    result = {
        "slide": slide.slide_id,
        "n_nuclei": len(nuclei),
        "n_regions": len(regions),
        "insufficient_graph": subgraph is None,
        "table": str(out / "cribriform.csv"),
    }
    if body.truth:
        if not (slide.root / TRUTH_JSON).is_file():
            raise ValueError(f"slide {slide.slide_id} carries no ground truth")
        truth = load_ground_truth(slide.root)
        detected = [r.to_global(slide.height, slide.width) for r in regions]
        hits, n_detected, n_truth = match_regions(detected, truth.cribriform_masks())
        result.update({"true_positives": hits, "n_truth": n_truth,
                       "precision": round(hits / n_detected, 6) if n_detected else None,
                       "recall": round(hits / n_truth, 6) if n_truth else None})
    return {"status": "complete", **result}
