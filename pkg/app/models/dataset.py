"""Dataset manifests, grading and evaluation records."""

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, field_validator

from app.models.slide import OverlayRegion
from app.utils import normalize_gleason


class DatasetEntry(BaseModel):
    slide_path: str
    label: str
    split: Literal["train", "eval", "excluded"]

    @field_validator("label")
    @classmethod
    def _canonical_label(cls, v: str) -> str:
        return normalize_gleason(v)


class DatasetManifest(BaseModel):
    """``dataset.json``: slide paths are relative to the manifest's directory."""

    format_version: int = 1
    entries: list[DatasetEntry] = []

    def split(self, name: str) -> list[DatasetEntry]:
        return [e for e in self.entries if e.split == name]


@dataclass
class DatasetPlan:
    """Split census of a manifest, computed before any slide is read."""

    train_grade3: list[DatasetEntry] = field(default_factory=list)
    train_grade4: list[DatasetEntry] = field(default_factory=list)
    eval: list[DatasetEntry] = field(default_factory=list)
    excluded: list[DatasetEntry] = field(default_factory=list)

    @property
    def train(self) -> list[DatasetEntry]:
        return self.train_grade3 + self.train_grade4

    def summary(self) -> dict:
        return {
            "train": len(self.train),
            "train_grade3": len(self.train_grade3),
            "train_grade4": len(self.train_grade4),
            "eval": len(self.eval),
            "excluded": len(self.excluded),
        }


@dataclass
class PatchDataset:
    """Weakly labeled hematoxylin patches (label 0 = grade 3, 1 = grade 4 and above)."""

    patches: np.ndarray = field(repr=False)
    labels: np.ndarray
    slide_ids: list[str]
    skipped: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def class_counts(self) -> dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


@dataclass
class SlideGrade:
    slide_id: str
    votes_grade3: int
    votes_grade4: int
    verdict: str
    outlines: list[OverlayRegion] = field(default_factory=list, repr=False)

    @property
    def n_patches(self) -> int:
        return self.votes_grade3 + self.votes_grade4

    @property
    def fraction_grade3(self) -> float:
        return self.votes_grade3 / self.n_patches if self.n_patches else 0.0

    @property
    def fraction_grade4(self) -> float:
        return self.votes_grade4 / self.n_patches if self.n_patches else 0.0


class EvaluationRecord(BaseModel):
    slide_id: str
    slide_path: str
    label: str
    votes_grade3: int
    votes_grade4: int
    fraction_grade3: float
    fraction_grade4: float
    verdict: str
    correct: bool


class EvaluationReport(BaseModel):
    accuracy: float
    n_slides: int
    n_correct: int
    confusion: dict[str, dict[str, int]]
    tie_rule: str = "ties grade as 4*+3"
    seed: int
    n_patches: int
    records: list[EvaluationRecord]
    skipped: list[str] = []
