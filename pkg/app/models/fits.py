"""Result records of the shared numeric kernels."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class KMeansResult:
    """Lloyd K-means outcome.

    ``objective`` is the (weighted) sum of squared distances of every point
    to its assigned center, recomputed from the final assignments.
    """

    assignments: np.ndarray
    centers: np.ndarray
    objective: float
    iterations: int
    history: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return int(self.centers.shape[0])


@dataclass
class GmmModel:
    """One-dimensional Gaussian mixture, modes sorted by ascending mean."""

    n_modes: int
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    log_likelihood: float
    degenerate: bool = False
    iterations: int = 0
    history: list[float] = field(default_factory=list)


@dataclass
class BfgsReport:
    x_star: np.ndarray
    f_star: float
    grad_norm: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)
