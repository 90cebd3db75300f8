"""Tests for the weak-label dataset, slide grading by vote and corpus evaluation."""

from unittest.mock import MagicMock, patch

import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from app.engine.grading import (
    VERDICT_GRADE3,
    VERDICT_GRADE4,
    CorpusEvaluator,
    GroundTruthClassifier,
    NetworkClassifier,
    PatchDatasetBuilder,
    SlideGrader,
    confusion_counts,
    grade_summary,
    load_patch_dataset,
    outlines_at_level,
    plan_dataset,
    save_patch_dataset,
    verdict_from_votes,
    write_evaluation,
)
from app.models.dataset import DatasetEntry, DatasetManifest, EvaluationRecord, PatchDataset, SlideGrade
from app.models.network import ConvBlock, NetworkConfig, TrainConfig
from app.models.slide import OverlayRegion, Patch
from app.services.cnn import accuracy, build_network, prepare_patches, train
from app.services.synth import synth_corpus, synth_slide
from app.utils import CLASS_GRADE3, CLASS_GRADE4, assign_split
from tests.conftest import make_synth_spec

# Gleason label census of the reference cohort.
LABEL_CENSUS = {
    "3+3": 38, "3+4": 114, "4+3": 76, "4+4": 47, "4+5": 74,
    "5+4": 16, "5+3": 6, "3+5": 5, "5+5": 3, "2+4": 1,
}


def _manifest(census: dict[str, int]) -> DatasetManifest:
    entries = []
    for label, count in census.items():
        for i in range(count):
            entries.append(DatasetEntry(slide_path=f"slides/{label.replace('+', '')}_{i}",
                                        label=label, split=assign_split(label)))
    return DatasetManifest(entries=entries)


def _patch(x=0, y=0, size=8, value=0):
    return Patch(slide_id="s", level=0, x=x, y=y, size=size,
                 pixels=np.full((size, size), value, dtype=np.uint8))


def _grade(slide_id, votes3, votes4):
    return SlideGrade(slide_id=slide_id, votes_grade3=votes3, votes_grade4=votes4,
                      verdict=verdict_from_votes(votes3, votes4))


# ---------------------------------------------------------------------------
# Votes
# ---------------------------------------------------------------------------

class TestVerdict:

    @pytest.mark.parametrize("votes3,votes4,expected", [
        (300, 200, VERDICT_GRADE3),
        (200, 300, VERDICT_GRADE4),
        (250, 250, VERDICT_GRADE4),
        (1, 0, VERDICT_GRADE3),
        (0, 0, VERDICT_GRADE4),
    ])
    def test_majority_with_ties_to_grade4(self, votes3, votes4, expected):
        assert verdict_from_votes(votes3, votes4) == expected

    def test_fractions(self):
        grade = _grade("s", 3, 1)
        assert grade.n_patches == 4
        assert grade.fraction_grade3 == 0.75
        summary = grade_summary(grade)
        assert summary["fraction_grade4"] == 0.25
        assert summary["verdict"] == VERDICT_GRADE3


# ---------------------------------------------------------------------------
# Dataset plan
# ---------------------------------------------------------------------------

class TestPlan:

    def test_reference_census(self):
        plan = plan_dataset(_manifest(LABEL_CENSUS))
        assert plan.summary() == {
            "train": 178,
            "train_grade3": 38,
            "train_grade4": 140,
            "eval": 190,
            "excluded": 12,
        }

    def test_splits_exhaustive_and_disjoint(self):
        plan = plan_dataset(_manifest(LABEL_CENSUS))
        paths = [e.slide_path for part in (plan.train, plan.eval, plan.excluded) for e in part]
        assert len(paths) == len(set(paths)) == sum(LABEL_CENSUS.values())

    def test_stated_split_overridden(self):
        manifest = DatasetManifest(entries=[DatasetEntry(slide_path="a", label="3+4", split="train")])
        plan = plan_dataset(manifest)
        assert plan.train == []
        assert [e.split for e in plan.eval] == ["eval"]

    def test_label_normalized(self):
        entry = DatasetEntry(slide_path="a", label=" 4 - 3 ", split="eval")
        assert entry.label == "4+3"

    def test_invalid_label_rejected(self):
        with pytest.raises(ValidationError):
            DatasetEntry(slide_path="a", label="6+1", split="train")

    def test_label_outside_census_rejected(self):
        manifest = DatasetManifest(entries=[DatasetEntry(slide_path="a", label="1+1", split="excluded")])
        with pytest.raises(ValueError, match="no split assignment"):
            plan_dataset(manifest)


# ---------------------------------------------------------------------------
# Patch dataset
# ---------------------------------------------------------------------------

class TestDatasetBuilder:

    def setup_method(self):
        self.manifest = _manifest({"3+3": 1, "4+4": 2, "3+4": 1})
        self.builder = PatchDatasetBuilder("/nonexistent", n_per_slide=2, patch_size=8, seed=1)

    def test_weak_labels_from_slide_labels(self):
        with patch.object(PatchDatasetBuilder, "_slide_patches", return_value=[_patch(), _patch()]) as sp:
            dataset = self.builder.build(self.manifest)
        assert sp.call_count == 3
        assert dataset.labels.tolist() == [CLASS_GRADE3] * 2 + [CLASS_GRADE4] * 4
        assert dataset.patches.shape == (6, 8, 8)
        assert dataset.class_counts() == {CLASS_GRADE3: 2, CLASS_GRADE4: 4}

    def test_failing_slide_skipped(self):
        side_effect = [ValueError("no tumor region"), [_patch()], [_patch()]]
        with patch.object(PatchDatasetBuilder, "_slide_patches", side_effect=side_effect):
            dataset = self.builder.build(self.manifest)
        assert dataset.skipped == ["slides/33_0"]
        assert len(dataset) == 2

    def test_empty_train_set(self):
        manifest = _manifest({"3+4": 2, "4+3": 1})
        with pytest.raises(ValueError, match="empty train set"):
            self.builder.build(manifest)

    def test_every_slide_skipped(self):
        with patch.object(PatchDatasetBuilder, "_slide_patches", side_effect=ValueError("no tumor region")):
            with pytest.raises(ValueError, match="empty train set"):
                self.builder.build(self.manifest)

    def test_save_and_load(self, tmp_path):
        dataset = PatchDataset(
            patches=np.arange(2 * 4 * 4, dtype=np.uint8).reshape(2, 4, 4),
            labels=np.array([0, 1]),
            slide_ids=["a", "b"],
            skipped=["c"],
        )
        out = save_patch_dataset(dataset, tmp_path / "ds")
        loaded = load_patch_dataset(out)
        np.testing.assert_array_equal(loaded.patches, dataset.patches)
        np.testing.assert_array_equal(loaded.labels, dataset.labels)
        assert loaded.slide_ids == ["a", "b"]
        assert loaded.skipped == ["c"]
        assert (tmp_path / "ds" / "dataset_meta.json").read_text().count('"n_patches": 2') == 1


# ---------------------------------------------------------------------------
# Slide grading
# ---------------------------------------------------------------------------

class TestSlideGrader:

    def setup_method(self):
        self.slide = MagicMock(slide_id="slide_x")
        self.pipeline = MagicMock()
        self.pipeline.patches.return_value = [_patch(0, 0), _patch(8, 0), _patch(16, 0)]
        self.classifier = MagicMock()

    def test_majority_vote(self):
        self.classifier.classify.return_value = np.array([CLASS_GRADE3, CLASS_GRADE3, CLASS_GRADE4])
        grade = SlideGrader(self.classifier, n_patches=3, patch_size=8).grade(self.slide, pipeline=self.pipeline)
        assert (grade.votes_grade3, grade.votes_grade4) == (2, 1)
        assert grade.verdict == VERDICT_GRADE3
        assert [r.label for r in grade.outlines] == ["3", "3", "4"]
        self.pipeline.patches.assert_called_once_with(3, 8, seed=0)

    def test_tie_grades_as_grade4(self):
        self.pipeline.patches.return_value = [_patch(), _patch()]
        self.classifier.classify.return_value = np.array([CLASS_GRADE3, CLASS_GRADE4])
        grade = SlideGrader(self.classifier, n_patches=2, patch_size=8).grade(self.slide, pipeline=self.pipeline)
        assert grade.verdict == VERDICT_GRADE4

    def test_seed_override(self):
        self.classifier.classify.return_value = np.zeros(3, dtype=int)
        SlideGrader(self.classifier, n_patches=3, patch_size=8, seed=4).grade(
            self.slide, seed=9, pipeline=self.pipeline)
        self.pipeline.patches.assert_called_once_with(3, 8, seed=9)

    def test_outlines_rescaled(self):
        slide = MagicMock()
        slide.level_info.return_value = MagicMock(downsample=4)
        grade = SlideGrade(slide_id="s", votes_grade3=1, votes_grade4=0, verdict=VERDICT_GRADE3,
                           outlines=[OverlayRegion.rectangle("3", 40, 80, 8, 8)])
        (region,) = outlines_at_level(grade, slide, 2)
        assert (region.x, region.y) == (10, 20)
        assert region.mask.shape == (3, 3)


def test_oracle_grades_mixture_slide(tmp_path):
    spec = make_synth_spec(grade4_share=0.3, label="3+4", seed=5)
    slide, _ = synth_slide(spec, tmp_path / "mix", tile_size=128)
    grader = SlideGrader(GroundTruthClassifier(), n_patches=40, patch_size=64, seed=2)
    grade = grader.grade(slide)
    assert grade.n_patches == 40
    assert grade.verdict == VERDICT_GRADE3


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

class TestCorpusEvaluator:

    def setup_method(self):
        self.manifest = _manifest({"3+3": 1, "3+4": 2, "4+3": 1})
        self.grader = SlideGrader(MagicMock(), n_patches=10, seed=3)

    @patch("app.engine.grading._grade_entry")
    def test_accuracy_and_confusion(self, grade_entry):
        grade_entry.side_effect = [_grade("a", 7, 3), _grade("b", 4, 6), _grade("c", 2, 8)]
        report = CorpusEvaluator("/data", self.grader).evaluate(self.manifest)
        assert grade_entry.call_count == 3
        assert report.n_slides == 3
        assert report.n_correct == 2
        assert report.accuracy == pytest.approx(2 / 3)
        assert report.confusion == {
            "3+4": {VERDICT_GRADE3: 1, VERDICT_GRADE4: 1},
            "4+3": {VERDICT_GRADE3: 0, VERDICT_GRADE4: 1},
        }
        assert report.seed == 3 and report.n_patches == 10

    @patch("app.engine.grading._grade_entry")
    def test_failed_slide_skipped(self, grade_entry):
        grade_entry.side_effect = [_grade("a", 7, 3), ValueError("no tumor region"), _grade("c", 2, 8)]
        report = CorpusEvaluator("/data", self.grader).evaluate(self.manifest)
        assert report.skipped == ["slides/34_1"]
        assert report.n_slides == 3
        assert len(report.records) == 2
        assert report.n_correct == 2
        assert report.accuracy == pytest.approx(2 / 3)
        assert report.accuracy == pytest.approx(
            report.n_correct / (len(report.records) + len(report.skipped)))

    @patch("app.engine.grading._grade_entry")
    def test_every_slide_failing_scores_zero(self, grade_entry):
        grade_entry.side_effect = ValueError("no tumor region")
        report = CorpusEvaluator("/data", self.grader).evaluate(self.manifest)
        assert report.records == []
        assert report.n_slides == 3
        assert report.accuracy == 0.0

    def test_empty_eval_split(self):
        with pytest.raises(ValueError, match="eval split is empty"):
            CorpusEvaluator("/data", self.grader).evaluate(_manifest({"3+3": 2}))

    def test_write_evaluation(self, tmp_path):
        record = EvaluationRecord(slide_id="a", slide_path="slides/a", label="3+4", votes_grade3=3,
                                  votes_grade4=1, fraction_grade3=0.75, fraction_grade4=0.25,
                                  verdict=VERDICT_GRADE3, correct=True)
        with patch("app.engine.grading._grade_entry", return_value=_grade("a", 3, 1)):
            report = CorpusEvaluator("/data", self.grader).evaluate(_manifest({"3+4": 1}))
        path = write_evaluation(report, tmp_path / "eval")
        assert path.name == "evaluation.json"
        frame = pd.read_csv(tmp_path / "eval" / "evaluation.csv")
        assert frame.columns.tolist() == list(EvaluationRecord.model_fields)
        assert frame.loc[0, "verdict"] == record.verdict
        assert bool(frame.loc[0, "correct"])

    def test_confusion_counts_unexpected_label(self):
        record = EvaluationRecord(slide_id="a", slide_path="a", label="4+4", votes_grade3=0,
                                  votes_grade4=1, fraction_grade3=0.0, fraction_grade4=1.0,
                                  verdict=VERDICT_GRADE4, correct=False)
        assert confusion_counts([record])["4+4"] == {VERDICT_GRADE3: 0, VERDICT_GRADE4: 1}


@pytest.mark.slow
def test_oracle_evaluation_on_synthetic_corpus(tmp_path):
    manifest = synth_corpus(2, tmp_path / "corpus", seed=7, width=512, height=512, tile_size=256)
    grader = SlideGrader(GroundTruthClassifier(), n_patches=60, patch_size=64, seed=1)
    report = CorpusEvaluator(tmp_path / "corpus", grader).evaluate(manifest)
    assert report.n_slides == 4
    assert report.accuracy == 1.0


@pytest.mark.slow
def test_trained_network_grades_synthetic_corpus(tmp_path):
    """Mask, decompose, sample, train and vote end to end on 80 synthetic slides."""
    root = tmp_path / "corpus"
    manifest = synth_corpus(20, root, seed=7, width=512, height=512, tile_size=256, jobs=4)
    dataset = PatchDatasetBuilder(root, n_per_slide=100, patch_size=64, seed=7).build(manifest)
    assert dataset.skipped == []

    config = NetworkConfig(
        input_size=64,
        conv_blocks=[ConvBlock(channels=c) for c in (4, 8, 8)],
        fc_sizes=[32],
        dropout={},
    )
    x = prepare_patches(dataset.patches)
    network, history = train(build_network(config, seed=7), x, dataset.labels,
                             TrainConfig(batch_size=100, learning_rate=0.05, iterations=2000, seed=7))
    assert np.mean(history[-100:]) < np.mean(history[:100])
    assert accuracy(network, x, dataset.labels) >= 0.9

    grader = SlideGrader(NetworkClassifier(network), n_patches=100, patch_size=64, seed=7)
    report = CorpusEvaluator(root, grader, jobs=4).evaluate(manifest)
    assert report.n_slides == 40
    assert report.accuracy >= 0.90
