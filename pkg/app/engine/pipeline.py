"""Per-slide pipeline: tumor mask → optimized stain decomposition → hematoxylin patches.

Each stage is computed once per ``SlidePipeline`` and reused; the optimized
decomposition matrix can be persisted into the slide manifest and is picked
up again on the next run when its λ matches.
"""

import logging

import numpy as np

from app.models.slide import Patch, SlidePackage, TissueMask
from app.models.stain import StainModel
from app.services.colorspace import rgb_to_od
from app.services.slide_io import read_region, sample_patches, sample_pixels, write_stain_record
from app.services.stain_compute import (
    apply_decomposition,
    default_stain_model,
    hematoxylin_plane_to_image,
    model_from_record,
    optimize_stain_matrix,
    to_record,
)
from app.services.tumor_mask import extract_tumor_mask

logger = logging.getLogger(__name__)


class SlidePipeline:
    """Lazily evaluated mask, stain model and hematoxylin views of one slide."""

    def __init__(
        self,
        slide: SlidePackage,
        k: int = 3,
        seed: int = 0,
        lam: float = 1.0,
        sample_size: int = 1_048_576,
        grad_tol: float = 1e-10,
        mask: TissueMask | None = None,
        persist: bool = False,
    ):
        self.slide = slide
        self.k = k
        self.seed = seed
        self.lam = lam
        self.sample_size = sample_size
        self.grad_tol = grad_tol
        self.persist = persist
        self._mask = mask
        self._model: StainModel | None = None

    @property
    def mask(self) -> TissueMask:
        if self._mask is None:
            self._mask = extract_tumor_mask(self.slide, k=self.k, seed=self.seed)
        return self._mask

    @property
    def stain_model(self) -> StainModel:
        if self._model is None:
            self._model = self._fit_stain_model()
        return self._model

    def _fit_stain_model(self) -> StainModel:
        record = self.slide.stain_record
        if record is not None and record.lam == self.lam:
            logger.info("Using stored decomposition matrix of %s (lambda=%g)", self.slide.slide_id, self.lam)
            return model_from_record(record)

        pixels = sample_pixels(self.slide, self.mask, self.sample_size, seed=self.seed)
        model = optimize_stain_matrix(rgb_to_od(pixels), default_stain_model(self.lam),
                                      grad_tol=self.grad_tol)
        if self.persist:
            self.slide = write_stain_record(self.slide, to_record(model))
        return model

    def hematoxylin(self, rgb: np.ndarray, model: StainModel | None = None) -> np.ndarray:
        """8-bit hematoxylin density image of an RGB array (optimized matrix by default)."""
        model = model or self.stain_model
        return hematoxylin_plane_to_image(apply_decomposition(rgb_to_od(rgb), model.D))

    def hematoxylin_region(self, x: int, y: int, w: int, h: int, level: int = 0) -> np.ndarray:
        return self.hematoxylin(read_region(self.slide, level, x, y, w, h))

    def patches(self, n: int, size: int, seed: int, level: int = 0) -> list[Patch]:
        """``n`` tumor patches whose pixels are hematoxylin planes (uint8, size × size)."""
        sampled = sample_patches(self.slide, self.mask, n, size, level=level, seed=seed)
        model = self.stain_model
        for patch in sampled:
            patch.pixels = self.hematoxylin(patch.pixels, model)
        return sampled
