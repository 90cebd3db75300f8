"""Nucleus and nuclei-graph records."""

from dataclasses import dataclass, field

import networkx as nx
import numpy as np


@dataclass
class NucleusRecord:
    """A detected nucleus; ``pixels`` holds (row, col) level-0 coordinates."""

    id: int
    x: float
    y: float
    area: int
    mean_density: float
    pixels: np.ndarray = field(repr=False)

    @property
    def centroid(self) -> tuple[float, float]:
        return self.x, self.y


@dataclass
class NucleiGraph:
    graph: nx.Graph
    radius_microns: float
    mpp: float
    positions: dict[int, tuple[float, float]] = field(default_factory=dict, repr=False)
    coefficients: dict[int, float] | None = field(default=None, repr=False)

    @property
    def vertices(self) -> list[int]:
        return sorted(self.graph.nodes)

    @property
    def edges(self) -> set[tuple[int, int]]:
        return {(min(a, b), max(a, b)) for a, b in self.graph.edges}
