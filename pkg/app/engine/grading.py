"""Weak-label dataset building, slide grading by patch vote, corpus evaluation.

Training uses whole-slide labels as patch labels: every tumor patch of a
3+3 slide is grade 3, every tumor patch of a 4+4 (or higher) slide is grade
4-and-above. 3+4 and 4+3 slides are held out for evaluation, where each
slide is graded by majority vote of its classified patches.
"""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Protocol

import numpy as np
import pandas as pd

from app.engine.pipeline import SlidePipeline
from app.models.dataset import (
    DatasetManifest,
    DatasetPlan,
    EvaluationRecord,
    EvaluationReport,
    PatchDataset,
    SlideGrade,
)
from app.models.network import Network
from app.models.slide import OverlayRegion, Patch, SlidePackage
from app.services.cnn import predict, prepare_patches
from app.services.slide_io import open_slide
from app.services.synth import load_ground_truth
from app.utils import CLASS_GRADE3, CLASS_GRADE4, assign_split, derive_seeds, training_class, write_json

logger = logging.getLogger(__name__)

VERDICT_GRADE3 = "3+4*"
VERDICT_GRADE4 = "4*+3"
EXPECTED_VERDICT = {"3+4": VERDICT_GRADE3, "4+3": VERDICT_GRADE4}


def verdict_from_votes(votes_grade3: int, votes_grade4: int) -> str:
    """Strict majority of grade-3 votes grades 3+4*; everything else, ties included, 4*+3."""
    return VERDICT_GRADE3 if votes_grade3 > votes_grade4 else VERDICT_GRADE4


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def plan_dataset(manifest: DatasetManifest) -> DatasetPlan:
    """Split census from the labels; a stated split that disagrees is overridden."""
    plan = DatasetPlan()
    for entry in manifest.entries:
        split = assign_split(entry.label)
        if split != entry.split:
            logger.warning("Slide %s labelled %s is listed as %s — using %s",
                           entry.slide_path, entry.label, entry.split, split)
            entry = entry.model_copy(update={"split": split})
        if split == "train":
            if training_class(entry.label) == CLASS_GRADE4:
                plan.train_grade4.append(entry)
            else:
                plan.train_grade3.append(entry)
        elif split == "eval":
            plan.eval.append(entry)
        else:
            plan.excluded.append(entry)
    return plan


def load_manifest(path: str | Path) -> DatasetManifest:
    return DatasetManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))


class PatchDatasetBuilder:
    """Draw weakly labeled hematoxylin patches from the training slides of a manifest."""

    def __init__(
        self,
        root: str | Path,
        n_per_slide: int = 500,
        patch_size: int = 256,
        seed: int = 0,
        k: int = 3,
        lam: float = 1.0,
    ):
        self.root = Path(root)
        self.n_per_slide = n_per_slide
        self.patch_size = patch_size
        self.seed = seed
        self.k = k
        self.lam = lam

    def _slide_patches(self, slide_path: str, seed: int) -> list[Patch]:
        slide = open_slide(self.root / slide_path)
        pipeline = SlidePipeline(slide, k=self.k, seed=seed, lam=self.lam)
        return pipeline.patches(self.n_per_slide, self.patch_size, seed=seed)

    def build(self, manifest: DatasetManifest) -> PatchDataset:
        """Patches of every training slide; slides that fail are logged and skipped.

        Raises:
            ValueError: "empty train set" when the manifest holds no training slide,
                or no training slide yielded patches.
        """
        plan = plan_dataset(manifest)
        logger.info("Dataset plan: %s", plan.summary())
        if not plan.train:
            raise ValueError("empty train set: no slide carries a training label")

        seeds = derive_seeds(self.seed, len(plan.train))
        pixels, labels, slide_ids, skipped = [], [], [], []
        for entry, seed in zip(plan.train, seeds):
            try:
                patches = self._slide_patches(entry.slide_path, seed)
            except ValueError as e:
                logger.warning("Skipping training slide %s: %s", entry.slide_path, e)
                skipped.append(entry.slide_path)
                continue
            cls = training_class(entry.label)
            pixels.extend(p.pixels for p in patches)
            labels.extend([cls] * len(patches))
            slide_ids.extend([entry.slide_path] * len(patches))

        if not pixels:
            raise ValueError("empty train set: every training slide was skipped")
        dataset = PatchDataset(
            patches=np.stack(pixels).astype(np.uint8),
            labels=np.array(labels, dtype=np.int64),
            slide_ids=slide_ids,
            skipped=skipped,
        )
        logger.info("Built %d patches — class counts %s, %d slides skipped",
                    len(dataset), dataset.class_counts(), len(skipped))
        return dataset


def save_patch_dataset(dataset: PatchDataset, out_dir: str | Path) -> Path:
    """``patches.npy``, ``labels.npy`` and ``dataset_meta.json`` (byte-stable)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "patches.npy", dataset.patches)
    np.save(out_dir / "labels.npy", dataset.labels)
    write_json(out_dir / "dataset_meta.json", {
        "n_patches": len(dataset),
        "patch_size": int(dataset.patches.shape[-1]),
        "class_counts": {str(k): v for k, v in dataset.class_counts().items()},
        "slide_ids": dataset.slide_ids,
        "skipped": dataset.skipped,
    })
    return out_dir


def load_patch_dataset(out_dir: str | Path) -> PatchDataset:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "dataset_meta.json").read_text(encoding="utf-8"))
    return PatchDataset(
        patches=np.load(out_dir / "patches.npy"),
        labels=np.load(out_dir / "labels.npy"),
        slide_ids=meta["slide_ids"],
        skipped=meta.get("skipped", []),
    )


# ---------------------------------------------------------------------------
# Grading
# ---------------------------------------------------------------------------

class PatchClassifier(Protocol):
    def classify(self, slide: SlidePackage, patches: list[Patch]) -> np.ndarray:
        """Class per patch: 0 grade 3, 1 grade 4 and above."""


class NetworkClassifier:
    """Classify hematoxylin patches with a trained network."""

    def __init__(self, network: Network, batch_size: int = 100):
        self.network = network
        self.batch_size = batch_size

    def classify(self, slide: SlidePackage, patches: list[Patch]) -> np.ndarray:
        if not patches:
            return np.empty(0, dtype=np.int64)
        x = prepare_patches(np.stack([p.pixels for p in patches]))
        return predict(self.network, x, batch_size=self.batch_size)


class GroundTruthClassifier:
    """Labels each patch by the generator's pattern map at the patch center.

    Only synthetic slides carry the ground truth this reads.
    """

    def classify(self, slide: SlidePackage, patches: list[Patch]) -> np.ndarray:
        truth = load_ground_truth(slide.root)
        classes = []
        for p in patches:
            f = slide.level_info(p.level).downsample
            cx, cy = p.center
            y = min(cy * f, truth.pattern.shape[0] - 1)
            x = min(cx * f, truth.pattern.shape[1] - 1)
            classes.append(CLASS_GRADE4 if truth.pattern[y, x] == 4 else CLASS_GRADE3)
        return np.array(classes, dtype=np.int64)


class SlideGrader:
    """Sample tumor patches, classify them, and grade the slide by vote."""

    def __init__(
        self,
        classifier: PatchClassifier,
        n_patches: int = 500,
        patch_size: int = 256,
        seed: int = 0,
        k: int = 3,
        lam: float = 1.0,
    ):
        self.classifier = classifier
        self.n_patches = n_patches
        self.patch_size = patch_size
        self.seed = seed
        self.k = k
        self.lam = lam

    def grade(self, slide: SlidePackage, seed: int | None = None,
              pipeline: SlidePipeline | None = None) -> SlideGrade:
        """Raises ValueError("no tumor region") when the tumor mask is empty."""
        seed = self.seed if seed is None else seed
        pipeline = pipeline or SlidePipeline(slide, k=self.k, seed=seed, lam=self.lam)
        patches = pipeline.patches(self.n_patches, self.patch_size, seed=seed)
        classes = np.asarray(self.classifier.classify(slide, patches))
        votes4 = int(np.sum(classes == CLASS_GRADE4))
        votes3 = len(patches) - votes4
        outlines = [
            OverlayRegion.rectangle("4" if c == CLASS_GRADE4 else "3", p.x, p.y, p.size, p.size)
            for p, c in zip(patches, classes)
        ]
        grade = SlideGrade(
            slide_id=slide.slide_id,
            votes_grade3=votes3,
            votes_grade4=votes4,
            verdict=verdict_from_votes(votes3, votes4),
            outlines=outlines,
        )
        logger.info("Graded %s — %d vs %d votes → %s", slide.slide_id, votes3, votes4, grade.verdict)
        return grade


def outlines_at_level(grade: SlideGrade, slide: SlidePackage, level: int) -> list[OverlayRegion]:
    """Patch outlines rescaled from level 0 to ``level`` (at least 3 px wide)."""
    f = slide.level_info(level).downsample
    regions = []
    for r in grade.outlines:
        h, w = r.mask.shape
        regions.append(OverlayRegion.rectangle(r.label, r.x // f, r.y // f, max(w // f, 3), max(h // f, 3)))
    return regions


def grade_summary(grade: SlideGrade) -> dict:
    return {
        "slide_id": grade.slide_id,
        "votes_grade3": grade.votes_grade3,
        "votes_grade4": grade.votes_grade4,
        "fraction_grade3": round(grade.fraction_grade3, 6),
        "fraction_grade4": round(grade.fraction_grade4, 6),
        "verdict": grade.verdict,
    }


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _grade_entry(args: tuple[SlideGrader, str, str, int]) -> SlideGrade:
    grader, root, slide_path, seed = args
    return grader.grade(open_slide(Path(root) / slide_path), seed=seed)


def confusion_counts(records: list[EvaluationRecord]) -> dict[str, dict[str, int]]:
    confusion = {label: {VERDICT_GRADE3: 0, VERDICT_GRADE4: 0} for label in EXPECTED_VERDICT}
    for r in records:
        confusion.setdefault(r.label, {VERDICT_GRADE3: 0, VERDICT_GRADE4: 0})
        confusion[r.label][r.verdict] += 1
    return confusion


class CorpusEvaluator:
    """Grade every evaluation slide of a manifest and score the verdicts."""

    def __init__(self, root: str | Path, grader: SlideGrader, jobs: int = 1):
        self.root = Path(root)
        self.grader = grader
        self.jobs = jobs

    def evaluate(self, manifest: DatasetManifest) -> EvaluationReport:
        entries = plan_dataset(manifest).eval
        if not entries:
            raise ValueError("eval split is empty")
        seeds = derive_seeds(self.grader.seed, len(entries))
        jobs = [(self.grader, str(self.root), e.slide_path, s) for e, s in zip(entries, seeds)]

        grades: list[SlideGrade | None] = []
        if self.jobs > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                futures = [pool.submit(_grade_entry, job) for job in jobs]
                for entry, future in zip(entries, futures):
                    grades.append(self._collect(entry.slide_path, future.result))
        else:
            for entry, job in zip(entries, jobs):
                grades.append(self._collect(entry.slide_path, lambda job=job: _grade_entry(job)))

        records, skipped = [], []
        for entry, grade in zip(entries, grades):
            if grade is None:
                skipped.append(entry.slide_path)
                continue
            records.append(EvaluationRecord(
                slide_id=grade.slide_id,
                slide_path=entry.slide_path,
                label=entry.label,
                votes_grade3=grade.votes_grade3,
                votes_grade4=grade.votes_grade4,
                fraction_grade3=round(grade.fraction_grade3, 6),
                fraction_grade4=round(grade.fraction_grade4, 6),
                verdict=grade.verdict,
                correct=grade.verdict == EXPECTED_VERDICT[entry.label],
            ))

        # Skipped slides count as incorrect.
        n_correct = sum(r.correct for r in records)
        report = EvaluationReport(
            accuracy=n_correct / len(entries),
            n_slides=len(entries),
            n_correct=n_correct,
            confusion=confusion_counts(records),
            seed=self.grader.seed,
            n_patches=self.grader.n_patches,
            records=records,
            skipped=skipped,
        )
        logger.info("Evaluation — accuracy %.4f on %d slides (%d skipped)",
                    report.accuracy, report.n_slides, len(skipped))
        return report

    @staticmethod
    def _collect(slide_path: str, result) -> SlideGrade | None:
        try:
            return result()
        except ValueError:
            logger.exception("Grading failed for %s", slide_path)
            return None


def write_evaluation(report: EvaluationReport, out_dir: str | Path) -> Path:
    """``evaluation.json`` (full report) and ``evaluation.csv`` (one row per slide)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "evaluation.json"
    path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    frame = pd.DataFrame([r.model_dump() for r in report.records],
                         columns=list(EvaluationRecord.model_fields))
    frame.to_csv(out_dir / "evaluation.csv", index=False)
    return path
