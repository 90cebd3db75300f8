"""Synthetic corpus generation and slide import."""

import logging
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, Field

from app.commands import output_dir
from app.config import settings
from app.models.synth import SynthSpec
from app.services.slide_io import read_image, write_slide
from app.services.synth import synth_corpus, synth_slide
from app.utils import normalize_gleason

logger = logging.getLogger(__name__)


class SynthCorpusRequest(BaseModel):
    out: str | None = None
    per_class: int = Field(default=2, ge=1)
    seed: int = 0
    width: int = Field(default=1024, ge=128)
    height: int = Field(default=1024, ge=128)
    mpp: float = Field(default=1.0, gt=0)
    tile_size: int = Field(default_factory=lambda: settings.tile_size, gt=0)
    jobs: int = Field(default_factory=lambda: settings.jobs, ge=1)


class SynthSlideRequest(BaseModel):
    out: str | None = None
    kind: Literal["grade3", "grade4", "benign"] = "grade3"
    cribriform: bool = False
    marker: bool = False
    grade4_share: float | None = Field(default=None, ge=0.0, le=1.0)
    label: str | None = None
    seed: int = 0
    width: int = Field(default=1024, ge=128)
    height: int = Field(default=1024, ge=128)
    mpp: float = Field(default=1.0, gt=0)
    tile_size: int = Field(default_factory=lambda: settings.tile_size, gt=0)


class ImportRequest(BaseModel):
    image: str
    out: str
    mpp: float = Field(default_factory=lambda: settings.default_mpp, gt=0)
    label: str | None = None
    tile_size: int = Field(default_factory=lambda: settings.tile_size, gt=0)


def run_synth_corpus(body: SynthCorpusRequest) -> dict:
    """Generate train (3+3, 4+4) and eval (3+4, 4+3) slides plus ``dataset.json``."""
    out = output_dir(body.out, "corpus")
    manifest = synth_corpus(
        body.per_class, out, seed=body.seed, width=body.width, height=body.height,
        mpp=body.mpp, tile_size=body.tile_size, jobs=body.jobs,
    )
    return {
        "status": "complete",
        "out": str(out),
        "manifest": str(out / "dataset.json"),
        "n_slides": len(manifest.entries),
        "train": len(manifest.split("train")),
        "eval": len(manifest.split("eval")),
    }


def run_synth_slide(body: SynthSlideRequest) -> dict:
    """Generate one slide package with its ground truth files."""
    out = output_dir(body.out, "slide")
    spec = SynthSpec(
        kind=body.kind, cribriform=body.cribriform, marker=body.marker,
        grade4_share=body.grade4_share,
        label=normalize_gleason(body.label) if body.label else None,
        seed=body.seed, width=body.width, height=body.height, mpp=body.mpp,
    )
    slide, truth = synth_slide(spec, out, tile_size=body.tile_size)
    return {
        "status": "complete",
        "slide": str(slide.root),
        "label": truth.label,
        "levels": len(slide.levels),
        "nuclei": len(truth.nuclei),
        "lumens": len(truth.lumens),
        "cribriform": len(truth.cribriform),
        "grade3_area": truth.grade3_area,
        "grade4_area": truth.grade4_area,
    }


def run_import(body: ImportRequest) -> dict:
    """Convert a single RGB image file into a tiled slide package."""
    rgb = read_image(body.image)
    label = normalize_gleason(body.label) if body.label else None
    slide = write_slide(Path(body.out), rgb, mpp=body.mpp, label=label, tile_size=body.tile_size)
    return {
        "status": "complete",
        "slide": str(slide.root),
        "width": slide.width,
        "height": slide.height,
        "levels": len(slide.levels),
        "label": label,
    }
