"""Deformation-field algebra.

Fields are stored as absolute coordinate maps phi: pixel grid ->
normalized [-1,1]^2 coordinates, shape [1,2,H,W] (x then y channel).
Velocities are per-pixel incremental displacements in the same units.
All operations here are differentiable through the autodiff tape except
`jacobian_det`, which is evaluation-side only.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor
from .pyramid import coord_grid

MAX_SQUARINGS = 10


def identity_field(height, width):
    """The identity deformation equals the coordinate grid."""
    return coord_grid(height, width)[None]


def _field_shape(t):
    s = t.shape if isinstance(t, Tensor) else np.asarray(t).shape
    if len(s) != 4 or s[0] != 1 or s[1] != 2:
        raise ContractViolation("expected a [1,2,H,W] field")
    return s[2], s[3]


def compose(outer, inner):
    """(outer o inner)(x) = outer(inner(x)), differentiable.

    Computed as inner + sample(outer - identity, inner): sampling the
    outer field's displacement instead of its absolute coordinates is
    exact wherever inner stays in range (bilinear interpolation
    reproduces the linear identity map) and extends the map by
    identity-plus-border-displacement outside, which keeps composed
    fields fold-free at the borders instead of flattening them.
    """
    ho, wo = _field_shape(outer)
    hi, wi = _field_shape(inner)
    if (ho, wo) != (hi, wi):
        raise ContractViolation("compose: field extents differ")
    grid = ad.constant(identity_field(ho, wo))
    disp = ad.sub(outer, grid)
    return ad.add(inner, ad.bilinear_sample(disp, inner))


def num_squarings(v_data, height, width):
    """Scaling steps so the scaled field moves at most half a pixel."""
    pixel = 2.0 / max(height, width)
    vmax = float(np.abs(v_data).max()) if v_data.size else 0.0
    n = math.ceil(math.log2(max(1.0, vmax / (0.5 * pixel))))
    return int(min(max(n, 0), MAX_SQUARINGS))


def exp_velocity(v):
    """Flow exponential of a stationary velocity by scaling and squaring."""
    h, w = _field_shape(v)
    v = ad._as_tensor(v)
    n = num_squarings(v.data, h, w)
    grid = ad.constant(identity_field(h, w))
    phi = ad.add(grid, ad.mul(v, 1.0 / (1 << n)))
    for _ in range(n):
        phi = compose(phi, phi)
    return phi


def upsample_deformation(d, new_height, new_width):
    """Bilinear resize of the coordinate channels onto a finer grid.

    Coordinates stay in [-1,1] at every resolution, so no value rescale
    is needed; identity maps to identity.
    """
    h, w = _field_shape(d)
    if new_height < h or new_width < w:
        raise ContractViolation("upsample_deformation cannot downsample")
    target = ad.constant(identity_field(new_height, new_width))
    return ad.bilinear_sample(d, target)


def smooth_velocity(v, sigma):
    """Separable Gaussian blur per channel; sigma 0 is the identity."""
    if sigma < 0:
        raise ContractViolation("sigma must be non-negative")
    v = ad._as_tensor(v)
    if sigma == 0:
        return v
    return ad.separable_correlate(v, ad.gaussian_kernel1d(sigma), axes=(2, 3))


def warp_image(image, d):
    """Resample an image tensor through a deformation field."""
    image = ad._as_tensor(image)
    h, w = _field_shape(d)
    if image.shape[2:] != (h, w):
        raise ContractViolation("warp_image: image and field extents differ")
    return ad.bilinear_sample(image, d)


def warp_mask_nearest(mask, d):
    """Nearest-neighbor warp for label masks (labels stay crisp)."""
    mask = np.asarray(mask)
    field = d.data if isinstance(d, Tensor) else np.asarray(d, dtype=np.float32)
    if field.ndim == 4:
        field = field[0]
    h, w = mask.shape
    ix = np.clip(np.round((field[0] + 1.0) * 0.5 * (w - 1)), 0, w - 1).astype(np.intp)
    iy = np.clip(np.round((field[1] + 1.0) * 0.5 * (h - 1)), 0, h - 1).astype(np.intp)
    return mask[iy, ix]


def field_to_pixels(field):
    """Absolute map in pixel units: ((phi+1)/2) * (extent-1) per axis."""
    field = field.data if isinstance(field, Tensor) else np.asarray(field, dtype=np.float32)
    if field.ndim == 4:
        field = field[0]
    h, w = field.shape[1], field.shape[2]
    px = (field[0].astype(np.float64) + 1.0) * 0.5 * (w - 1)
    py = (field[1].astype(np.float64) + 1.0) * 0.5 * (h - 1)
    return px, py


def displacement_pixels(field):
    """Displacement u = phi - x in pixel units, shape [2,H,W]."""
    px, py = field_to_pixels(field)
    h, w = px.shape
    ux = px - np.arange(w)[None, :]
    uy = py - np.arange(h)[:, None]
    return np.stack([ux, uy])


def jacobian_det(field):
    """Determinant of the local 2x2 Jacobian, per pixel.

    Computed in pixel units with central differences in the interior and
    one-sided differences at the borders; the identity field yields 1
    everywhere to floating-point precision.
    """
    px, py = field_to_pixels(field)
    if px.shape[0] < 3 or px.shape[1] < 3:
        raise ContractViolation("jacobian_det needs extents >= 3x3")
    dpx_dy, dpx_dx = np.gradient(px)
    dpy_dy, dpy_dx = np.gradient(py)
    return (dpx_dx * dpy_dy - dpx_dy * dpy_dx).astype(np.float32)
