"""Pattern detector records."""

from dataclasses import dataclass, field

import numpy as np

from app.models.fits import GmmModel


@dataclass
class NucleoliFlag:
    nucleus_id: int
    prominent: bool
    dark_mean: float
    light_mean: float
    separation: float
    dark_weight: float
    status: str = "ok"


@dataclass
class LumenCandidate:
    """A hollow (all channels bright) region; ``pixels`` are (row, col) slide coordinates."""

    area: int
    perimeter: float
    roundness: float
    pixels: np.ndarray = field(repr=False)

    @property
    def centroid(self) -> tuple[float, float]:
        return float(self.pixels[:, 1].mean()), float(self.pixels[:, 0].mean())


@dataclass
class TumorSubgraph:
    vertices: frozenset[int]
    degenerate: bool
    model: GmmModel | None = None


@dataclass
class CribriformRegion:
    """Gland region (local mask at origin x, y) holding several round lumens."""

    x: int
    y: int
    mask: np.ndarray = field(repr=False)
    lumens: list[LumenCandidate] = field(default_factory=list)
    vertex_ids: list[int] = field(default_factory=list)

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def to_global(self, height: int, width: int) -> np.ndarray:
        """Region as a full-size boolean mask at level 0."""
        out = np.zeros((height, width), dtype=bool)
        h, w = self.mask.shape
        out[self.y:self.y + h, self.x:self.x + w] = self.mask
        return out
