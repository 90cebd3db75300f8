"""Stain decomposition with a per-slide optimized decomposition matrix.

The stain model is O = M·S with M = [u, v, w] the unit OD vectors of
hematoxylin, eosin and a third (DAB) stain. Decomposition applies
D = M⁻¹ per pixel. D is tuned per slide by minimizing

    E(D) = mean_x (d·O(x))² + λ‖D − D̄‖²_F

where d is the third row of D and D̄ the prior inverse, so that an H&E
slide leaves (almost) nothing in the third channel.
"""

import logging

import numpy as np

from app.models.slide import StainRecord
from app.models.stain import EnergyReport, StainModel
from app.services.colorspace import LOG_256
from app.services.numerics import bfgs_minimize, finite_diff_grad, max_relative_error

logger = logging.getLogger(__name__)

# Hematoxylin / eosin / DAB OD vectors of the classic color deconvolution prior.
RUIFROK_HED = np.array(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ]
)

SATURATION_LEVEL = 0.9 * LOG_256


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def default_stain_model(lam: float = 1.0) -> StainModel:
    """Unit-normalized H/E/DAB prior with D̄ = M̄⁻¹."""
    vectors = RUIFROK_HED / np.linalg.norm(RUIFROK_HED, axis=1, keepdims=True)
    u, v, w = vectors
    M = np.column_stack([u, v, w])
    D_bar = np.linalg.inv(M)
    return StainModel(u=u, v=v, w=w, D=D_bar.copy(), D_bar=D_bar, lam=float(lam))


def model_from_record(record: StainRecord) -> StainModel:
    """Restore a model whose D was persisted with a slide."""
    base = default_stain_model(record.lam)
    return base.with_D(np.array(record.entries, dtype=np.float64).reshape(3, 3))


def to_record(model: StainModel) -> StainRecord:
    return StainRecord(
        entries=[float(e) for e in model.D.ravel()],
        lam=model.lam,
        prior_id=model.prior_id,
    )


# ---------------------------------------------------------------------------
# Energy
# ---------------------------------------------------------------------------

def second_moment(od: np.ndarray) -> np.ndarray:
    """G = mean over pixels of O·Oᵀ (3×3)."""
    pixels = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    if pixels.shape[0] == 0:
        raise ValueError("od must contain at least one pixel")
    return pixels.T @ pixels / pixels.shape[0]


def energy_from_moment(D: np.ndarray, G: np.ndarray, model: StainModel) -> EnergyReport:
    """E(D) and its gradient, given the pixel second-moment matrix G.

    The data term only depends on the pixels through G, so this is exact.
    """
    D = np.asarray(D, dtype=np.float64).reshape(3, 3)
    d = D[2]
    data_term = float(d @ G @ d)
    delta = D - model.D_bar
    reg_term = float(model.lam * np.sum(delta**2))
    gradient = 2.0 * model.lam * delta
    gradient[2] += 2.0 * (G @ d)
    return EnergyReport(
        total=data_term + reg_term,
        data_term=data_term,
        reg_term=reg_term,
        gradient=gradient.ravel(),
    )


def energy(D: np.ndarray, od: np.ndarray, model: StainModel) -> EnergyReport:
    """E(D) = mean (d·O)² + λ‖D − D̄‖² with its analytic gradient (row-major, 9 entries)."""
    if model.lam < 0:
        raise ValueError("lambda must be >= 0")
    return energy_from_moment(D, second_moment(od), model)


def energy_gradient_check(
    n_cases: int = 100, seed: int = 0, h: float = 1e-5, n_pixels: int = 64, floor: float = 1e-4
) -> float:
    """Max relative error of the analytic E(D) gradient against central differences.

    Each case draws λ log-uniformly in [1e-3, 1e3], H/E/DAB densities for
    ``n_pixels`` pixels and a D perturbed around D̄.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        model = default_stain_model(10.0 ** rng.uniform(-3.0, 3.0))
        od = rng.uniform(0.0, 2.0, size=(n_pixels, 3)) @ model.M.T
        D = model.D_bar + rng.normal(0.0, 0.1, size=(3, 3))
        analytic = energy(D, od, model).gradient
        numeric = finite_diff_grad(lambda x: energy(x, od, model).total, D.ravel(), h)
        worst = max(worst, max_relative_error(analytic, numeric, floor=floor))
    logger.info("Energy gradient check: %d cases, max relative error %.3g", n_cases, worst)
    return worst


def ridge_row3_closed_form(od: np.ndarray, model: StainModel) -> np.ndarray:
    """Closed-form minimizer of row 3: (G + λI)d = λ·d̄₃."""
    if model.lam <= 0:
        raise ValueError("lambda must be > 0")
    G = second_moment(od)
    return np.linalg.solve(G + model.lam * np.eye(3), model.lam * model.D_bar[2])


def optimize_stain_matrix(
    od: np.ndarray, model: StainModel, grad_tol: float = 1e-10, max_iter: int = 200
) -> StainModel:
    """BFGS over the nine entries of D, starting from D̄."""
    if model.lam <= 0:
        raise ValueError("lambda must be > 0")
    G = second_moment(od)

    def objective(x: np.ndarray) -> tuple[float, np.ndarray]:
        report = energy_from_moment(x, G, model)
        return report.total, report.gradient

    result = bfgs_minimize(objective, model.D_bar.ravel(), grad_tol=grad_tol, max_iter=max_iter)
    start = energy_from_moment(model.D_bar, G, model)
    logger.info(
        "Stain matrix optimized — lambda=%g E(D_bar)=%.6g E(D*)=%.6g iterations=%d converged=%s",
        model.lam, start.total, result.f_star, result.iterations, result.converged,
    )
    if not result.converged:
        logger.warning("Stain optimization stopped with |grad|=%.3g > %.3g",
                       result.grad_norm, grad_tol)
    return model.with_D(result.x_star.reshape(3, 3))


# ---------------------------------------------------------------------------
# Decomposition
# ---------------------------------------------------------------------------

def apply_decomposition(od: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Per-pixel S = D·O; plane 0 is hematoxylin, 1 eosin, 2 the third stain."""
    od = np.asarray(od, dtype=np.float64)
    return od @ np.asarray(D, dtype=np.float64).T


def standard_decomposition(od: np.ndarray, model: StainModel) -> np.ndarray:
    """Decomposition with the fixed prior D̄ (for comparison with the optimized D)."""
    return apply_decomposition(od, model.D_bar)


def hematoxylin_plane_to_image(s: np.ndarray) -> np.ndarray:
    """Clamp hematoxylin density to [0, ln 256] and rescale to 8-bit (0 = none)."""
    h = np.clip(np.asarray(s, dtype=np.float64)[..., 0], 0.0, LOG_256)
    return np.rint(h * (255.0 / LOG_256)).astype(np.uint8)


def hematoxylin_intensity(plane: np.ndarray) -> np.ndarray:
    """Hematoxylin plane as transmitted intensity (dense stain = dark)."""
    return (255 - np.asarray(plane, dtype=np.int16)).astype(np.uint8)


def saturation_fraction(s: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Share of pixels whose hematoxylin density is at least 90% of the 8-bit range."""
    h = np.asarray(s, dtype=np.float64)[..., 0]
    if mask is not None:
        h = h[mask]
    return float(np.mean(h >= SATURATION_LEVEL)) if h.size else 0.0
