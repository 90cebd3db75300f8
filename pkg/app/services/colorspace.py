"""Color-space transforms: RGB ↔ optical density, RGB → CIE L*a*b*.

Optical density uses the natural log with a +1 offset so that black pixels
stay finite: O = −ln((I + 1) / 256).
"""

import numpy as np
from skimage.color import rgb2lab

LOG_256 = float(np.log(256.0))


def rgb_to_od(rgb: np.ndarray) -> np.ndarray:
    """8-bit RGB → optical density (float64, same shape)."""
    intensity = np.asarray(rgb, dtype=np.float64)
    return -np.log((intensity + 1.0) / 256.0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    """Optical density → 8-bit RGB, rounded and clipped to [0, 255]."""
    intensity = 256.0 * np.exp(-np.asarray(od, dtype=np.float64)) - 1.0
    return np.clip(np.rint(intensity), 0, 255).astype(np.uint8)


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """8-bit sRGB → CIE L*a*b* (D65 white, 2° observer)."""
    return rgb2lab(np.asarray(rgb, dtype=np.uint8), illuminant="D65", observer="2")
