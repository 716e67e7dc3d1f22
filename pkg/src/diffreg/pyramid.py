"""Gaussian image pyramids and canonical [-1,1] coordinate grids."""

from __future__ import annotations

import numpy as np

from .autodiff import ContractViolation

# 5-tap binomial approximation of a Gaussian; integer-exact weights
_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0], dtype=np.float64) / 16.0


class ConfigurationError(ValueError):
    pass


def _blur_binomial(img):
    from .autodiff import _corr1d_reflect

    out = _corr1d_reflect(img.astype(np.float64), _BINOMIAL5, 0)
    out = _corr1d_reflect(out, _BINOMIAL5, 1)
    return out.astype(np.float32)


def max_levels(height, width, min_side=8):
    """Largest K such that the coarsest level keeps min_side pixels per side."""
    k = 1
    h, w = height, width
    while True:
        h2, w2 = (h + 1) // 2, (w + 1) // 2
        if min(h2, w2) < min_side:
            return k
        h, w = h2, w2
        k += 1


def gaussian_pyramid(image, levels):
    """Blur-and-decimate pyramid, finest first.

    Each ascent applies the separable binomial blur with reflect borders,
    then keeps every other pixel starting at index 0. Extents shrink as
    ceil(previous / 2).
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise ContractViolation("gaussian_pyramid expects a 2-D image")
    if levels < 1:
        raise ConfigurationError("levels must be >= 1")
    feasible = max_levels(*image.shape)
    if levels > feasible:
        raise ConfigurationError(
            f"levels={levels} too deep for {image.shape[0]}x{image.shape[1]} image; "
            f"maximum feasible is {feasible}"
        )
    pyr = [image]
    for _ in range(levels - 1):
        blurred = _blur_binomial(pyr[-1])
        pyr.append(np.ascontiguousarray(blurred[::2, ::2]))
    return pyr


def coord_grid(height, width):
    """Per-pixel normalized coordinates, shape [2, H, W] (x then y).

    x at column j is -1 + 2j/(W-1); y at row i is -1 + 2i/(H-1), so the
    corner pixel centers land exactly on (+-1, +-1).
    """
    if height < 2 or width < 2:
        raise ContractViolation("coord_grid needs extents >= 2")
    x = np.linspace(-1.0, 1.0, width, dtype=np.float32)
    y = np.linspace(-1.0, 1.0, height, dtype=np.float32)
    gx, gy = np.meshgrid(x, y)
    return np.stack([gx, gy]).astype(np.float32)
