"""Stain model records."""

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class StainModel:
    """Unit OD vectors of the three stains plus the decomposition matrices.

    ``D`` is the active decomposition matrix (S = D·O); ``D_bar`` the prior
    it is regularised towards with weight ``lam``.
    """

    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    D: np.ndarray
    D_bar: np.ndarray
    lam: float = 1.0
    prior_id: str = "ruifrok-hed"
    optimized: bool = False

    @property
    def M(self) -> np.ndarray:
        """Stain matrix with the OD vectors as columns."""
        return np.column_stack([self.u, self.v, self.w])

    def with_D(self, D: np.ndarray) -> "StainModel":
        return replace(self, D=np.asarray(D, dtype=np.float64).reshape(3, 3), optimized=True)

    def with_lambda(self, lam: float) -> "StainModel":
        return replace(self, lam=float(lam))


@dataclass
class EnergyReport:
    total: float
    data_term: float
    reg_term: float
    gradient: np.ndarray = field(repr=False)
