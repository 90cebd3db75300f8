"""Synthetic slide specification and ground truth."""

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field
from skimage.draw import disk


class SynthSpec(BaseModel):
    """Parameters of one synthetic slide.

    ``grade4_share`` turns a tumor into a mixture: that fraction of the tumor
    area carries the fused-sheet pattern, the rest separated glands.
    """

    kind: Literal["grade3", "grade4", "benign"] = "grade3"
    width: int = Field(default=1024, ge=128)
    height: int = Field(default=1024, ge=128)
    mpp: float = Field(default=1.0, gt=0)
    gland_density: float = Field(default=1.0, gt=0, le=2.0)
    cribriform: bool = False
    marker: bool = False
    grade4_share: float | None = Field(default=None, ge=0.0, le=1.0)
    label: str | None = None
    seed: int = 0


class NucleusTruth(BaseModel):
    x: float
    y: float
    semi_major: float
    semi_minor: float
    angle: float
    nucleolus: bool = False


class LumenTruth(BaseModel):
    x: float
    y: float
    radius: float
    kind: Literal["gland", "sheet", "cribriform"]


class CribriformTruth(BaseModel):
    x: float
    y: float
    radius: float
    lumens: list[int]


class GroundTruthRecord(BaseModel):
    """JSON form of the geometric ground truth (masks are stored as PNG)."""

    label: str | None
    kind: str
    width: int
    height: int
    mpp: float
    nuclei: list[NucleusTruth]
    lumens: list[LumenTruth]
    cribriform: list[CribriformTruth]
    grade3_area: int
    grade4_area: int


@dataclass
class GroundTruth:
    """Generator bookkeeping: what was drawn where.

    ``pattern`` holds 3 / 4 over tumor pixels carrying that pattern, 0 elsewhere.
    ``glands`` covers every drawn gland: lumen plus epithelial rim for separated
    glands, the whole fused sheet, the whole cribriform gland.
    """

    label: str | None
    kind: str
    mpp: float
    tumor: np.ndarray = field(repr=False)
    pattern: np.ndarray = field(repr=False)
    marker: np.ndarray = field(repr=False)
    glands: np.ndarray = field(repr=False)
    nuclei: list[NucleusTruth] = field(default_factory=list)
    lumens: list[LumenTruth] = field(default_factory=list)
    cribriform: list[CribriformTruth] = field(default_factory=list)

    @property
    def grade3_area(self) -> int:
        return int((self.pattern == 3).sum())

    @property
    def grade4_area(self) -> int:
        return int((self.pattern == 4).sum())

    def lumen_mask(self) -> np.ndarray:
        out = np.zeros(self.tumor.shape, dtype=bool)
        for lumen in self.lumens:
            rr, cc = disk((lumen.y, lumen.x), lumen.radius, shape=out.shape)
            out[rr, cc] = True
        return out

    def cribriform_masks(self) -> list[np.ndarray]:
        masks = []
        for region in self.cribriform:
            out = np.zeros(self.tumor.shape, dtype=bool)
            rr, cc = disk((region.y, region.x), region.radius, shape=out.shape)
            out[rr, cc] = True
            masks.append(out)
        return masks

    def to_record(self) -> GroundTruthRecord:
        h, w = self.tumor.shape
        return GroundTruthRecord(
            label=self.label, kind=self.kind, width=w, height=h, mpp=self.mpp,
            nuclei=self.nuclei, lumens=self.lumens, cribriform=self.cribriform,
            grade3_area=self.grade3_area, grade4_area=self.grade4_area,
        )
