"""Shared utility functions used across commands and services."""

import json
from pathlib import Path

import numpy as np


# ---------------------------------------------------------------------------
# Gleason labels
# ---------------------------------------------------------------------------

# Split assignment of every grade string in the reference label census.
GLEASON_SPLITS: dict[str, str] = {
    "3+3": "train",
    "4+4": "train",
    "4+5": "train",
    "5+4": "train",
    "5+5": "train",
    "3+4": "eval",
    "4+3": "eval",
    "2+4": "excluded",
    "3+5": "excluded",
    "5+3": "excluded",
}

CLASS_GRADE3 = 0
CLASS_GRADE4 = 1


def normalize_gleason(label: str) -> str:
    """Normalize a Gleason score string to the canonical ``P+S`` form.

    Accepts:
        "3+4", " 3 + 4 ", "3-4", "3/4" → "3+4"

    Raises ValueError when the string is not two grades in 1..5.
    """
    s = str(label).strip().replace(" ", "")
    for sep in ("-", "/"):
        s = s.replace(sep, "+")
    parts = s.split("+")
    if len(parts) != 2 or not all(p.isdigit() for p in parts):
        raise ValueError(f"invalid Gleason label: {label!r}")
    primary, secondary = int(parts[0]), int(parts[1])
    if not (1 <= primary <= 5 and 1 <= secondary <= 5):
        raise ValueError(f"invalid Gleason label: {label!r}")
    return f"{primary}+{secondary}"


def assign_split(label: str) -> str:
    """Return ``train``, ``eval`` or ``excluded`` for a Gleason label.

    Grades outside the reference census are rejected rather than guessed.
    """
    canonical = normalize_gleason(label)
    split = GLEASON_SPLITS.get(canonical)
    if split is None:
        raise ValueError(f"Gleason label {canonical} has no split assignment")
    return split


def training_class(label: str) -> int:
    """Weak patch class for a training-split label: 3+3 → grade 3, others → grade 4 and above."""
    canonical = normalize_gleason(label)
    if assign_split(canonical) != "train":
        raise ValueError(f"Gleason label {canonical} is not a training label")
    return CLASS_GRADE3 if canonical == "3+3" else CLASS_GRADE4


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------

def derive_seeds(seed: int, n: int) -> list[int]:
    """Derive ``n`` independent child seeds from a master seed.

    Child i depends only on (seed, i), so work can be split across
    processes without changing results.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(child.generate_state(1, dtype=np.uint32)[0]) for child in children]


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_json(path: str | Path, payload: dict) -> Path:
    """Write a dict as indented, key-sorted JSON (byte-stable for equal input)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
