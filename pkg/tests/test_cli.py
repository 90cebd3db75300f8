"""Tests for the command-line entry point: exit codes, JSON records and provenance."""

import argparse
import json
from pathlib import Path
from unittest.mock import patch

import pytest

from app.commands.gradcheck import tiny_config
from app.main import _dropout, _masked_argv, _region, build_parser, provenance_record, run
from app.services.cnn import build_network, save_weights


def _record(capsys) -> dict:
    lines = capsys.readouterr().out.strip().splitlines()
    return json.loads(lines[-1])


def _files(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

class TestArguments:

    def test_dropout_list(self):
        assert _dropout("6:0.75,7:0.5") == {6: 0.75, 7: 0.5}
        assert _dropout("") == {}

    def test_dropout_malformed(self):
        with pytest.raises(argparse.ArgumentTypeError):
            _dropout("six:0.75")

    def test_region(self):
        assert _region("10,20,30,40") == (10, 20, 30, 40)
        with pytest.raises(argparse.ArgumentTypeError):
            _region("10,20,30")

    def test_lambda_flag(self):
        args = build_parser().parse_args(["decompose", "slide_dir", "--lambda", "0.5"])
        assert args.lam == 0.5
        assert args.level is None

    def test_masked_argv(self):
        assert _masked_argv(["synth", "--out", "/tmp/a", "--seed", "3"]) == ["synth", "--out", "<out>", "--seed", "3"]
        assert _masked_argv(["mask", "s", "--out=/tmp/b"]) == ["mask", "s", "--out=<out>"]

    @pytest.mark.parametrize("argv", [
        [],
        ["bogus"],
        ["grade", "slide_dir"],
        ["grade", "slide_dir", "--oracle", "--weights", "w.bin"],
        ["train", "ds", "--loss", "hinge"],
    ])
    def test_usage_errors_exit_2(self, argv):
        assert run(argv) == 2


# ---------------------------------------------------------------------------
# Records and exit codes
# ---------------------------------------------------------------------------

class TestRun:

    def test_gradcheck_passes(self, tmp_path, capsys):
        code = run(["gradcheck", "--cases", "5", "--params", "30", "--out", str(tmp_path)])
        record = _record(capsys)
        assert code == 0
        assert record["status"] == "complete"
        assert record["command"] == "gradcheck"
        assert record["passed"] is True
        assert record["cnn_parameters_checked"] == 30

    def test_failed_gradient_check_exits_1(self, tmp_path, capsys):
        with patch("app.commands.gradcheck.energy_gradient_check", return_value=1.0):
            code = run(["gradcheck", "--cases", "2", "--params", "10", "--out", str(tmp_path)])
        assert code == 1
        assert _record(capsys)["passed"] is False

    def test_pipeline_error_record(self, tmp_path, capsys):
        code = run(["mask", str(tmp_path / "missing"), "--out", str(tmp_path / "out")])
        record = _record(capsys)
        assert code == 1
        assert record["status"] == "error"
        assert record["command"] == "mask"
        assert "invalid package" in record["error"]

    def test_provenance_written(self, tmp_path, capsys):
        run(["gradcheck", "--cases", "2", "--params", "10", "--seed", "4", "--out", str(tmp_path)])
        provenance = json.loads((tmp_path / "provenance.json").read_text())
        assert provenance["command"] == "gradcheck"
        assert provenance["seeds"] == {"seed": 4}
        assert provenance["argv"][-2:] == ["--out", "<out>"]
        assert "numpy" in provenance["versions"]
        assert "data_dir" not in provenance["settings"]
        assert "timestamp" not in provenance

    def test_timestamps_opt_in(self):
        args = build_parser().parse_args(["gradcheck", "--timestamps"])
        assert "timestamp" in provenance_record(args, ["gradcheck", "--timestamps"])

    def test_default_output_dir(self, settings_override, tmp_path, capsys):
        assert run(["gradcheck", "--cases", "2", "--params", "10"]) == 0
        assert (tmp_path / "data" / "gradcheck" / "provenance.json").is_file()


# ---------------------------------------------------------------------------
# End to end on synthetic slides
# ---------------------------------------------------------------------------

class TestSyntheticRuns:

    def test_corpus_reruns_byte_identical(self, tmp_path, capsys):
        common = ["--per-class", "1", "--width", "256", "--height", "256", "--tile-size", "128", "--seed", "9"]
        assert run(["synth", *common, "--out", str(tmp_path / "a")]) == 0
        assert run(["synth", *common, "--out", str(tmp_path / "b")]) == 0
        record = _record(capsys)
        assert record["n_slides"] == 4
        assert (record["train"], record["eval"]) == (2, 2)
        first, second = _files(tmp_path / "a"), _files(tmp_path / "b")
        assert "provenance.json" in first
        assert "dataset.json" in first
        assert first == second

    def test_oracle_grades_mixture_slide(self, tmp_path, capsys):
        slide_dir = tmp_path / "slide"
        assert run(["synth", "--kind", "grade3", "--grade4-share", "0.3", "--label", "3+4",
                    "--width", "512", "--height", "512", "--tile-size", "128", "--seed", "5",
                    "--out", str(slide_dir)]) == 0
        code = run(["grade", str(slide_dir), "--oracle", "--patches", "40", "--size", "64",
                    "--seed", "2", "--out", str(tmp_path / "grade")])
        record = _record(capsys)
        assert code == 0
        assert record["verdict"] == "3+4*"
        assert record["votes_grade3"] + record["votes_grade4"] == 40
        assert json.loads((tmp_path / "grade" / "grade.json").read_text())["verdict"] == "3+4*"
        assert (tmp_path / "grade" / "grade_overlay.png").is_file()

    def test_mask_reports_dice(self, tmp_path, capsys):
        slide_dir = tmp_path / "slide"
        run(["synth", "--kind", "grade3", "--width", "512", "--height", "512", "--tile-size", "128",
             "--seed", "3", "--out", str(slide_dir)])
        code = run(["mask", str(slide_dir), "--truth", "--out", str(tmp_path / "mask")])
        record = _record(capsys)
        assert code == 0
        assert 0.0 <= record["dice"] <= 1.0
        assert (tmp_path / "mask" / "tumor_mask.png").is_file()

    def test_weights_size_mismatch(self, tmp_slide, tmp_path, capsys):
        slide, _ = tmp_slide
        weights = save_weights(build_network(tiny_config()), tmp_path / "weights.bin")
        code = run(["grade", str(slide.root), "--weights", str(weights), "--size", "64",
                    "--out", str(tmp_path / "grade")])
        record = _record(capsys)
        assert code == 1
        assert "does not match the network input" in record["error"]

    @pytest.mark.slow
    def test_pipeline_reruns_byte_identical(self, tmp_path, capsys):
        corpus = tmp_path / "corpus"
        assert run(["synth", "--per-class", "1", "--width", "256", "--height", "256",
                    "--tile-size", "128", "--seed", "9", "--out", str(corpus)]) == 0
        manifest = corpus / "dataset.json"
        slide = corpus / json.loads(manifest.read_text())["entries"][0]["slide_path"]
        first_dataset = tmp_path / "dataset_a"
        first_weights = tmp_path / "train_a" / "weights.bin"

        steps = [
            ["mask", str(slide), "--seed", "2"],
            ["dataset", str(manifest), "--patches", "20", "--size", "32", "--seed", "3"],
            ["train", str(first_dataset), "--iters", "25", "--batch", "10", "--lr", "0.05",
             "--channels", "2,2", "--fc", "4", "--seed", "4"],
            ["eval", str(manifest), "--weights", str(first_weights), "--patches", "10",
             "--size", "32", "--seed", "5"],
        ]

        for tag in ("a", "b"):
            for argv in steps:
                assert run([*argv, "--out", str(tmp_path / f"{argv[0]}_{tag}")]) == 0, _record(capsys)

        for command in ("mask", "dataset", "train", "eval"):
            first, second = _files(tmp_path / f"{command}_a"), _files(tmp_path / f"{command}_b")
            assert first and first == second, command
        assert "tumor_mask.png" in _files(tmp_path / "mask_a")
        assert "weights.bin" in _files(tmp_path / "train_a")
        assert "evaluation.json" in _files(tmp_path / "eval_a")
