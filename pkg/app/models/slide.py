"""Slide package, mask and patch records."""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field


class LevelInfo(BaseModel):
    level: int
    width: int
    height: int
    tile_size: int
    downsample: int


class StainRecord(BaseModel):
    """Optimized decomposition matrix persisted with a slide (row-major)."""

    entries: list[float] = Field(min_length=9, max_length=9)
    lam: float
    prior_id: str


class SlideManifest(BaseModel):
    """Contents of ``manifest.json`` in a slide package."""

    format_version: int = 1
    width: int
    height: int
    mpp: float = Field(gt=0)
    tile_size: int = Field(gt=0)
    levels: list[LevelInfo]
    label: str | None = None
    stain_matrix: StainRecord | None = None


@dataclass
class SlidePackage:
    root: Path
    manifest: SlideManifest

    @property
    def slide_id(self) -> str:
        return self.root.name

    @property
    def width(self) -> int:
        return self.manifest.width

    @property
    def height(self) -> int:
        return self.manifest.height

    @property
    def mpp(self) -> float:
        return self.manifest.mpp

    @property
    def levels(self) -> list[LevelInfo]:
        return self.manifest.levels

    @property
    def label(self) -> str | None:
        return self.manifest.label

    @property
    def stain_record(self) -> StainRecord | None:
        return self.manifest.stain_matrix

    @property
    def lowest_level(self) -> int:
        return len(self.manifest.levels) - 1

    def level_info(self, level: int) -> LevelInfo:
        if not 0 <= level < len(self.manifest.levels):
            raise ValueError(f"level {level} not in slide {self.slide_id}")
        return self.manifest.levels[level]

    def microns_to_pixels(self, microns: float, level: int = 0) -> float:
        return microns / (self.mpp * self.level_info(level).downsample)


@dataclass
class TissueMask:
    """Per-pixel class labels at one pyramid level (0 background, 1 tumor)."""

    level: int
    labels: np.ndarray

    @property
    def width(self) -> int:
        return int(self.labels.shape[1])

    @property
    def height(self) -> int:
        return int(self.labels.shape[0])

    @property
    def tumor(self) -> np.ndarray:
        return self.labels == 1

    @property
    def tumor_fraction(self) -> float:
        return float(self.tumor.mean()) if self.labels.size else 0.0


@dataclass
class Patch:
    slide_id: str
    level: int
    x: int
    y: int
    size: int
    pixels: np.ndarray = field(repr=False)

    @property
    def center(self) -> tuple[int, int]:
        return self.x + self.size // 2, self.y + self.size // 2


@dataclass
class OverlayRegion:
    """A labeled pixel region for overlay rendering.

    ``mask`` is local to the region's bounding box whose top-left corner is
    (x, y) in level pixels.
    """

    label: str
    x: int
    y: int
    mask: np.ndarray = field(repr=False)

    @classmethod
    def rectangle(cls, label: str, x: int, y: int, w: int, h: int) -> "OverlayRegion":
        return cls(label=label, x=x, y=y, mask=np.ones((h, w), dtype=bool))
