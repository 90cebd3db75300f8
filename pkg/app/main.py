"""Command-line entry point: ``python -m app.main <command> ...``.

Every run prints one JSON line on stdout, ``{"status": "complete", ...}`` or
``{"status": "error", ...}``, and writes ``provenance.json`` next to its
artifacts. Logging goes to stderr.
"""

import argparse
import json
import logging
import platform
import sys
from datetime import datetime, timezone
from importlib import metadata
from typing import Callable

from app.commands import output_dir
from app.commands.detectors import (
    CribriformRequest,
    NucleiRequest,
    NucleoliRequest,
    run_cribriform,
    run_nuclei,
    run_nucleoli,
)
from app.commands.gradcheck import GradcheckRequest, run_gradcheck
from app.commands.grading import EvalRequest, GradeRequest, run_eval, run_grade
from app.commands.slide import DecomposeRequest, MaskRequest, run_decompose, run_mask
from app.commands.synth import (
    ImportRequest,
    SynthCorpusRequest,
    SynthSlideRequest,
    run_import,
    run_synth_corpus,
    run_synth_slide,
)
from app.commands.training import DatasetRequest, TrainRequest, run_dataset, run_train
from app.config import settings
from app.utils import write_json

logger = logging.getLogger(__name__)

PROVENANCE_PACKAGES = ("numpy", "scipy", "scikit-image", "pandas", "pydantic", "networkx", "Pillow")


# ---------------------------------------------------------------------------
# Argument types
# ---------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _region(text: str) -> tuple[int, int, int, int]:
    values = _int_list(text)
    if len(values) != 4:
        raise argparse.ArgumentTypeError(f"region must be x,y,w,h, got {text!r}")
    return tuple(values)


def _dropout(text: str) -> dict[int, float]:
    """``6:0.75,7:0.75`` → {6: 0.75, 7: 0.75}; an empty string disables dropout."""
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        layer, _, p = item.partition(":")
        try:
            out[int(layer)] = float(p)
        except ValueError:
            raise argparse.ArgumentTypeError(f"dropout entries are layer:probability, got {item!r}")
    return out


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output directory (default: $PROSTATE_WSI_DATA_DIR/<command>)")
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--timestamps", action="store_true", help="record wall-clock time in provenance.json")


def _add_detector(p: argparse.ArgumentParser) -> None:
    p.add_argument("slide", help="slide package directory")
    _add_common(p)
    p.add_argument("--region", type=_region, help="level-0 region x,y,w,h (default: whole slide)")
    p.add_argument("--k", type=int, default=None, help="K-means clusters for the tumor mask (3 or 4)")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="stain regularization weight")
    p.add_argument("--threshold", type=int, default=None, help="nucleus threshold on the 8-bit hematoxylin plane")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prostate-wsi",
        description="Prostate whole-slide analysis: tumor masking, optimized stain "
                    "decomposition, micro-CNN grading and pattern detectors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus, or one slide with --kind")
    _add_common(p)
    p.add_argument("--per-class", type=int, default=2, help="slides per label and split")
    p.add_argument("--width", type=int, default=1024)
    p.add_argument("--height", type=int, default=1024)
    p.add_argument("--mpp", type=float, default=1.0)
    p.add_argument("--tile-size", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--kind", choices=["grade3", "grade4", "benign"], help="write a single slide of this kind")
    p.add_argument("--cribriform", action="store_true", help="single slide: add a cribriform gland")
    p.add_argument("--marker", action="store_true", help="single slide: add pen-marker strokes")
    p.add_argument("--grade4-share", type=float, default=None, help="single slide: tumor share of pattern 4")
    p.add_argument("--label", help="single slide: Gleason label stored in the manifest")

    p = sub.add_parser("import", help="convert an RGB image file into a slide package")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mpp", type=float, default=None)
    p.add_argument("--label")
    p.add_argument("--tile-size", type=int, default=None)
    p.add_argument("--timestamps", action="store_true")

    p = sub.add_parser("mask", help="K-means tumor mask")
    p.add_argument("slide")
    _add_common(p)
    p.add_argument("--k", type=int, default=None, help="clusters: 3, or 4 with pen markers")
    p.add_argument("--truth", action="store_true", help="report Dice against synthetic ground truth")

    p = sub.add_parser("decompose", help="optimize the decomposition matrix and write hematoxylin planes")
    p.add_argument("slide")
    _add_common(p)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--level", type=int, default=None, help="pyramid level to decompose (default: lowest)")
    p.add_argument("--compare", action="store_true", help="also write pre-defined vs optimized stacked PNG")
    p.add_argument("--persist", action="store_true", help="store the optimized matrix in the slide manifest")

    p = sub.add_parser("dataset", help="build the weak-label patch set from a corpus manifest")
    p.add_argument("manifest")
    _add_common(p)
    p.add_argument("--patches", type=int, default=None, help="patches per training slide")
    p.add_argument("--size", type=int, default=None, help="patch side in pixels")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)

    p = sub.add_parser("train", help="train the micro-CNN on a patch set")
    p.add_argument("dataset", help="directory written by the dataset command")
    _add_common(p)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=int, default=100)
    p.add_argument("--loss", choices=["mse", "xent"], default="mse")
    p.add_argument("--channels", type=_int_list, default=None, help="conv block channels, e.g. 8,16,32")
    p.add_argument("--fc", type=_int_list, default=None, help="fully connected sizes, e.g. 64,32")
    p.add_argument("--dropout", type=_dropout, default=None, help="layer:probability list, e.g. 6:0.75,7:0.75")

    for name, help_text in (("grade", "grade one slide by patch vote"),
                            ("eval", "grade the evaluation split of a corpus")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("slide" if name == "grade" else "manifest")
        _add_common(p)
        group = p.add_mutually_exclusive_group(required=True)
        group.add_argument("--weights", help="weight file written by train")
        group.add_argument("--oracle", action="store_true", help="classify patches from synthetic ground truth")
        p.add_argument("--patches", type=int, default=None)
        p.add_argument("--size", type=int, default=None)
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        if name == "eval":
            p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("nuclei", help="export detected nuclei (and clustering coefficients)")
    _add_detector(p)
    p.add_argument("--graph", action="store_true", help="add per-vertex clustering coefficients")

    p = sub.add_parser("nucleoli", help="prominent-nucleoli detector")
    _add_detector(p)
    p.add_argument("--separation", type=float, default=None)
    p.add_argument("--min-dark-weight", type=float, default=None)

    p = sub.add_parser("cribriform", help="cribriform gland detector")
    _add_detector(p)
    p.add_argument("--min-roundness", type=float, default=None)
    p.add_argument("--min-lumens", type=int, default=None)
    p.add_argument("--truth", action="store_true", help="score regions against synthetic ground truth")

    p = sub.add_parser("gradcheck", help="energy and micro-CNN gradient suites")
    _add_common(p)
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--params", type=int, default=200)
    p.add_argument("--loss", choices=["mse", "xent"], default="mse")

    return parser


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def _fields(args: argparse.Namespace, *names: str) -> dict:
    """Namespace values for request fields, leaving unset (None) flags to the settings defaults."""
    return {name: getattr(args, name) for name in names if getattr(args, name, None) is not None}


def _dispatch(args: argparse.Namespace) -> tuple[Callable[[], dict], str | None]:
    """Handler thunk plus the default output subdirectory (None when --out is required)."""
    cmd = args.command
    if cmd == "synth":
        if args.kind:
            body = SynthSlideRequest(**_fields(args, "out", "kind", "cribriform", "marker", "grade4_share",
                                               "label", "seed", "width", "height", "mpp", "tile_size"))
            return lambda: run_synth_slide(body), "slide"
        body = SynthCorpusRequest(**_fields(args, "out", "seed", "width", "height", "mpp", "tile_size", "jobs",
                                            "per_class"))
        return lambda: run_synth_corpus(body), "corpus"
    if cmd == "import":
        body = ImportRequest(**_fields(args, "image", "out", "mpp", "label", "tile_size"))
        return lambda: run_import(body), None
    if cmd == "mask":
        body = MaskRequest(**_fields(args, "slide", "out", "k", "seed", "truth"))
        return lambda: run_mask(body), "mask"
    if cmd == "decompose":
        body = DecomposeRequest(**_fields(args, "slide", "out", "lam", "k", "seed", "level", "compare", "persist"))
        return lambda: run_decompose(body), "decompose"
    if cmd == "dataset":
        body = DatasetRequest(**_fields(args, "manifest", "out", "patches", "size", "seed", "k", "lam"))
        return lambda: run_dataset(body), "dataset"
    if cmd == "train":
        body = TrainRequest(**_fields(args, "dataset", "out", "iters", "lr", "batch", "seed", "loss",
                                      "channels", "fc", "dropout"))
        return lambda: run_train(body), "train"
    if cmd == "grade":
        body = GradeRequest(**_fields(args, "slide", "out", "weights", "oracle", "patches", "size", "seed",
                                      "k", "lam"))
        return lambda: run_grade(body), "grade"
    if cmd == "eval":
        body = EvalRequest(**_fields(args, "manifest", "out", "weights", "oracle", "patches", "size", "seed",
                                     "k", "lam", "jobs"))
        return lambda: run_eval(body), "eval"
    if cmd == "nuclei":
        body = NucleiRequest(**_fields(args, "slide", "out", "region", "seed", "k", "lam", "threshold", "graph"))
        return lambda: run_nuclei(body), "nuclei"
    if cmd == "nucleoli":
        body = NucleoliRequest(**_fields(args, "slide", "out", "region", "seed", "k", "lam", "threshold",
                                         "separation", "min_dark_weight"))
        return lambda: run_nucleoli(body), "nucleoli"
    if cmd == "cribriform":
        body = CribriformRequest(**_fields(args, "slide", "out", "region", "seed", "k", "lam", "threshold",
                                           "min_roundness", "min_lumens", "truth"))
        return lambda: run_cribriform(body), "cribriform"
    if cmd == "gradcheck":
        body = GradcheckRequest(**_fields(args, "seed", "cases", "params", "loss"))
        return lambda: run_gradcheck(body), "gradcheck"
    raise ValueError(f"unknown command {cmd!r}")


def _package_versions() -> dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in PROVENANCE_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


def _masked_argv(argv: list[str]) -> list[str]:
    """argv with the output location replaced, so reruns into other directories compare equal."""
    out, skip = [], False
    for arg in argv:
        if skip:
            out.append("<out>")
            skip = False
        elif arg == "--out":
            out.append(arg)
            skip = True
        elif arg.startswith("--out="):
            out.append("--out=<out>")
        else:
            out.append(arg)
    return out


def provenance_record(args: argparse.Namespace, argv: list[str]) -> dict:
    """Command, masked argv, seeds, package versions and a settings snapshot."""
    record = {
        "command": args.command,
        "argv": _masked_argv(argv),
        "seeds": {"seed": args.seed} if hasattr(args, "seed") else {},
        "versions": _package_versions(),
        "settings": settings.model_dump(exclude={"data_dir"}),
    }
    if getattr(args, "timestamps", False):
        record["timestamp"] = datetime.now(timezone.utc).isoformat()
    return record


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record, sort_keys=True, default=str) + "\n")
    sys.stdout.flush()


def run(argv: list[str] | None = None) -> int:
    """Parse ``argv``, run the command and return the process exit code.

    0 success, 1 pipeline error (or a failed gradient check), 2 usage error.
    """
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        handler, default_dir = _dispatch(args)
        result = handler()
        prov_dir = output_dir(args.out, default_dir or args.command)
        write_json(prov_dir / "provenance.json", provenance_record(args, argv))
    except Exception as e:
        logger.exception("Command %s failed", args.command)
        _emit({"status": "error", "command": args.command, "error": str(e)})
        return 1

    _emit({**result, "command": args.command})
    return 1 if result.get("passed") is False else 0


def main() -> None:
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logger.info("prostate-wsi starting (env=%s)", settings.app_env)
    sys.exit(run())


if __name__ == "__main__":
    main()
