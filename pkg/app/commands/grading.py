"""Slide grading and corpus evaluation."""

import logging
from pathlib import Path

from pydantic import BaseModel, Field, model_validator

from app.commands import output_dir
from app.config import settings
from app.engine.grading import (
    CorpusEvaluator,
    GroundTruthClassifier,
    NetworkClassifier,
    SlideGrader,
    grade_summary,
    load_manifest,
    outlines_at_level,
    write_evaluation,
)
from app.services.cnn import load_weights
from app.services.slide_io import open_slide, write_overlay
from app.utils import write_json

logger = logging.getLogger(__name__)


class _ClassifierChoice(BaseModel):
    weights: str | None = None
    oracle: bool = False
    patches: int = Field(default_factory=lambda: settings.patches_per_slide, ge=1)
    size: int | None = Field(default=None, ge=4)
    seed: int = 0
    k: int = Field(default_factory=lambda: settings.kmeans_k)
    lam: float = Field(default_factory=lambda: settings.stain_lambda, gt=0)

    @model_validator(mode="after")
    def _one_classifier(self):
        if (self.weights is None) == (not self.oracle):
            raise ValueError("exactly one of --weights or --oracle is required")
        return self


class GradeRequest(_ClassifierChoice):
    slide: str
    out: str | None = None


class EvalRequest(_ClassifierChoice):
    manifest: str
    out: str | None = None
    jobs: int = Field(default_factory=lambda: settings.jobs, ge=1)


def build_grader(body: _ClassifierChoice) -> SlideGrader:
    """Grader around a trained network or, for synthetic slides, the ground-truth oracle."""
    if body.weights is not None:
        network = load_weights(body.weights)
        size = body.size or network.config.input_size
        if size != network.config.input_size:
            raise ValueError(
                f"patch size {size} does not match the network input {network.config.input_size}"
            )
        classifier = NetworkClassifier(network)
    else:
        size = body.size or settings.patch_size
        classifier = GroundTruthClassifier()
    return SlideGrader(classifier, n_patches=body.patches, patch_size=size,
                       seed=body.seed, k=body.k, lam=body.lam)


def run_grade(body: GradeRequest) -> dict:
    """Grade one slide by patch vote; writes ``grade.json`` and an outline overlay."""
    slide = open_slide(body.slide)
    out = output_dir(body.out, "grade")
    grade = build_grader(body).grade(slide)
    level = slide.lowest_level
    write_overlay(slide, level, outlines_at_level(grade, slide, level), out / "grade_overlay.png")
    summary = {**grade_summary(grade), "seed": body.seed, "n_patches": grade.n_patches}
    write_json(out / "grade.json", summary)
    return {"status": "complete", **summary, "overlay": str(out / "grade_overlay.png")}


def run_eval(body: EvalRequest) -> dict:
    """Grade every evaluation slide of a manifest and report slide-level accuracy."""
    manifest = load_manifest(body.manifest)
    out = output_dir(body.out, "eval")
    evaluator = CorpusEvaluator(Path(body.manifest).parent, build_grader(body), jobs=body.jobs)
    report = evaluator.evaluate(manifest)
    path = write_evaluation(report, out)
    return {
        "status": "complete",
        "accuracy": round(report.accuracy, 6),
        "n_slides": report.n_slides,
        "n_correct": report.n_correct,
        "confusion": report.confusion,
        "skipped": report.skipped,
        "report": str(path),
    }
