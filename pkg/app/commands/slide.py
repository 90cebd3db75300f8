"""Per-slide commands: tumor mask and stain decomposition."""

import logging

import numpy as np
from pydantic import BaseModel, Field

from app.commands import output_dir
from app.config import settings
from app.engine.pipeline import SlidePipeline
from app.models.slide import OverlayRegion
from app.services.colorspace import rgb_to_od
from app.services.slide_io import open_slide, read_level, write_mask, write_overlay, write_plane
from app.services.stain_compute import (
    apply_decomposition,
    energy,
    hematoxylin_plane_to_image,
    saturation_fraction,
    standard_decomposition,
)
from app.services.synth import TRUTH_JSON, load_ground_truth
from app.services.tumor_mask import dice, downsample_truth, extract_tumor_mask, upsample_mask
from app.utils import write_json

logger = logging.getLogger(__name__)


class MaskRequest(BaseModel):
    slide: str
    out: str | None = None
    k: int = Field(default_factory=lambda: settings.kmeans_k)
    seed: int = 0
    max_iter: int = Field(default_factory=lambda: settings.kmeans_max_iter, ge=1)
    truth: bool = False


class DecomposeRequest(BaseModel):
    slide: str
    out: str | None = None
    lam: float = Field(default_factory=lambda: settings.stain_lambda, gt=0)
    k: int = Field(default_factory=lambda: settings.kmeans_k)
    seed: int = 0
    level: int | None = None
    compare: bool = False
    persist: bool = False


def run_mask(body: MaskRequest) -> dict:
    """K-means tumor mask at the lowest level, written as PNG plus an outline overlay."""
    slide = open_slide(body.slide)
    out = output_dir(body.out, "mask")
    mask = extract_tumor_mask(slide, k=body.k, seed=body.seed, max_iter=body.max_iter,
                              max_pixels=settings.mask_max_pixels)
    write_mask(mask, out / "tumor_mask.png")
    write_overlay(slide, mask.level, [OverlayRegion("tumor", 0, 0, mask.tumor)],
                  out / "tumor_overlay.png")

    result = {
        "slide": slide.slide_id,
        "level": mask.level,
        "k": body.k,
        "seed": body.seed,
        "tumor_fraction": round(mask.tumor_fraction, 6),
        "mask": str(out / "tumor_mask.png"),
    }
    if body.truth:
        if not (slide.root / TRUTH_JSON).is_file():
            raise ValueError(f"slide {slide.slide_id} carries no ground truth")
        truth = load_ground_truth(slide.root)
        f = slide.level_info(mask.level).downsample
        reference = downsample_truth(truth.tumor, f)[:mask.height, :mask.width]
        result["dice"] = round(dice(mask.tumor, reference), 6)
    return {"status": "complete", **result}


def _tumor_at_level(pipeline: SlidePipeline, level: int, shape: tuple[int, int]) -> np.ndarray:
    mask = pipeline.mask
    slide = pipeline.slide
    factor = slide.level_info(mask.level).downsample // slide.level_info(level).downsample
    if factor < 1:
        raise ValueError(f"level {level} is coarser than the mask level {mask.level}")
    return upsample_mask(mask.tumor, factor, shape)


def run_decompose(body: DecomposeRequest) -> dict:
    """Optimize D on tumor pixels and write the optimized and pre-defined hematoxylin planes."""
    slide = open_slide(body.slide)
    out = output_dir(body.out, "decompose")
    pipeline = SlidePipeline(
        slide, k=body.k, seed=body.seed, lam=body.lam,
        sample_size=settings.stain_sample_pixels, grad_tol=settings.stain_grad_tol,
        persist=body.persist,
    )
    model = pipeline.stain_model
    level = slide.lowest_level if body.level is None else body.level
    rgb = read_level(pipeline.slide, level)
    od = rgb_to_od(rgb)
    tumor = _tumor_at_level(pipeline, level, rgb.shape[:2])

    optimized = apply_decomposition(od, model.D)
    standard = standard_decomposition(od, model)
    hema = hematoxylin_plane_to_image(optimized)
    hema_standard = hematoxylin_plane_to_image(standard)
    write_plane(hema, out / "hematoxylin.png")
    write_plane(hema_standard, out / "hematoxylin_standard.png")
    if body.compare:
        write_plane(np.vstack([hema_standard, hema]), out / "hematoxylin_compare.png")

    tumor_od = od[tumor]
    before = energy(model.D_bar, tumor_od, model) if tumor_od.size else None
    after = energy(model.D, tumor_od, model) if tumor_od.size else None
    write_json(out / "stain_matrix.json", {
        "lam": model.lam,
        "prior_id": model.prior_id,
        "D": np.round(model.D, 12).tolist(),
        "D_bar": np.round(model.D_bar, 12).tolist(),
    })
    logger.info("Decomposed %s level %d — saturation %.4f (standard) vs %.4f (optimized)",
                slide.slide_id, level, saturation_fraction(standard, tumor),
                saturation_fraction(optimized, tumor))
    return {
        "status": "complete",
        "slide": slide.slide_id,
        "level": level,
        "lam": model.lam,
        "persisted": body.persist,
        "energy_standard": round(before.total, 10) if before else None,
        "energy_optimized": round(after.total, 10) if after else None,
        "saturation_standard": round(saturation_fraction(standard, tumor), 6),
        "saturation_optimized": round(saturation_fraction(optimized, tumor), 6),
        "hematoxylin": str(out / "hematoxylin.png"),
    }
