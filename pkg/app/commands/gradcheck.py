"""Gradient suites: stain energy and micro-CNN backprop against central differences."""

import logging
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field

from app.models.network import ConvBlock, NetworkConfig
from app.services.cnn import build_network, gradient_check
from app.services.stain_compute import energy_gradient_check

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4


class GradcheckRequest(BaseModel):
    seed: int = 0
    cases: int = Field(default=100, ge=1)
    params: int = Field(default=200, ge=1)
    h: float = Field(default=1e-5, gt=0)
    loss: Literal["mse", "xent"] = "mse"


def tiny_config(loss: str = "mse") -> NetworkConfig:
    """8×8 input, two conv blocks, one hidden fully connected layer."""
    return NetworkConfig(
        input_size=8,
        conv_blocks=[ConvBlock(kernel=3, channels=4), ConvBlock(kernel=3, channels=4)],
        fc_sizes=[8],
        dropout={},
        loss=loss,
    )


def run_gradcheck(body: GradcheckRequest) -> dict:
    """Both suites; ``passed`` is False when either error reaches the tolerance."""
    energy_error = energy_gradient_check(n_cases=body.cases, seed=body.seed, h=body.h)

    rng = np.random.default_rng(body.seed)
    network = build_network(tiny_config(body.loss), seed=body.seed)
    batch = rng.uniform(0.0, 1.0, size=(4, 1, 8, 8))
    labels = np.array([0, 1, 0, 1])
    cnn_error, n_checked = gradient_check(network, batch, labels, h=body.h,
                                          n_params=body.params, seed=body.seed)

    passed = energy_error < TOLERANCE and cnn_error < TOLERANCE
    if not passed:
        logger.warning("Gradient check failed — energy %.3g, network %.3g (tolerance %g)",
                       energy_error, cnn_error, TOLERANCE)
    return {
        "status": "complete",
        "passed": passed,
        "tolerance": TOLERANCE,
        "energy_cases": body.cases,
        "energy_max_relative_error": float(f"{energy_error:.6g}"),
        "cnn_parameters_checked": n_checked,
        "cnn_max_relative_error": float(f"{cnn_error:.6g}"),
    }
