"""Shared test fixtures and factory helpers.

Slides used by the tests are small synthetic packages written to
``tmp_path``; nothing touches the configured data directory.
"""

import numpy as np
import pytest
from skimage.draw import disk

from app.config import settings
from app.models.network import ConvBlock, NetworkConfig
from app.models.synth import SynthSpec
from app.services.stain_compute import default_stain_model
from app.services.synth import synth_slide


# ---------------------------------------------------------------------------
# Factory helpers
# ---------------------------------------------------------------------------

def make_rgb_tile(height=32, width=32, seed=0, low=0, high=256):
    """Uniform random 8-bit RGB tile."""
    rng = np.random.default_rng(seed)
    return rng.integers(low, high, size=(height, width, 3), dtype=np.uint8)


def make_stain_tile(n_pixels=256, seed=0, lam=1.0, dab=0.0):
    """(od, model): OD pixels mixed from H and E densities (plus optional DAB)."""
    rng = np.random.default_rng(seed)
    model = default_stain_model(lam)
    dens = rng.uniform(0.05, 1.5, size=(n_pixels, 3))
    dens[:, 2] *= dab
    return dens @ model.M.T, model


def make_disc_mask(radius, pad=4):
    """Boolean rasterized disc centered in a (2r + 2·pad + 1)² frame."""
    size = 2 * radius + 2 * pad + 1
    mask = np.zeros((size, size), dtype=bool)
    rr, cc = disk((size // 2, size // 2), radius + 0.5, shape=mask.shape)
    mask[rr, cc] = True
    return mask


def make_synth_spec(**overrides):
    defaults = {"kind": "grade3", "width": 512, "height": 512, "mpp": 1.0, "seed": 3}
    defaults.update(overrides)
    return SynthSpec(**defaults)


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

@pytest.fixture()
def tmp_slide(tmp_path):
    """A 512×512 synthetic grade-3 slide package with 128-px tiles: (slide, truth)."""
    return synth_slide(make_synth_spec(), tmp_path / "slide_g3", tile_size=128)


@pytest.fixture()
def tiny_network_config():
    return NetworkConfig(
        input_size=8,
        conv_blocks=[ConvBlock(kernel=3, channels=3), ConvBlock(kernel=3, channels=4)],
        fc_sizes=[6],
        dropout={},
    )


@pytest.fixture()
def settings_override(monkeypatch, tmp_path):
    """Point the data directory at ``tmp_path``; returns a setter for further overrides."""
    monkeypatch.setattr(settings, "data_dir", str(tmp_path / "data"))

    def override(**values):
        for name, value in values.items():
            monkeypatch.setattr(settings, name, value)

    return override
