"""Synthetic ground-truth pairs for oracle-based testing.

A smooth random velocity is exponentiated into a diffeomorphic field;
the moving image is the phantom warped through it, so a registration can
be scored against a known deformation instead of clinical data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractViolation, constant
from .warp import exp_velocity, warp_image, warp_mask_nearest, jacobian_det


def random_smooth_velocity(seed, amplitude_px, sigma_px, extents):
    """Blurred white noise rescaled to a max displacement, [1,2,H,W].

    amplitude_px caps the infinity norm in pixels; the stored field is in
    normalized units (2/(extent-1) per pixel along each axis).
    """
    h, w = extents
    if amplitude_px < 0:
        raise ContractViolation("amplitude must be non-negative")
    if amplitude_px > 0.25 * min(h, w):
        raise ContractViolation(
            f"amplitude {amplitude_px}px exceeds 0.25 * min extent ({0.25 * min(h, w)}px)")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((2, h, w))
    if sigma_px > 0:
        from .autodiff import _corr1d_reflect, gaussian_kernel1d

        k = gaussian_kernel1d(sigma_px).astype(np.float64)
        noise = _corr1d_reflect(_corr1d_reflect(noise, k, 1), k, 2)
    peak = np.abs(noise).max()
    if amplitude_px == 0 or peak == 0:
        return np.zeros((1, 2, h, w), dtype=np.float32)
    px = noise * (amplitude_px / peak)  # pixel units, max-norm == amplitude
    v = np.empty_like(px)
    v[0] = px[0] * (2.0 / (w - 1))
    v[1] = px[1] * (2.0 / (h - 1))
    return v[None].astype(np.float32)


def make_phantom(size, seed=0):
    """Blurred annulus-plus-disk phantom over a textured background.

    Texture covers the whole domain, including the interior of the two
    structures: a registration can only recover the deformation where
    intensity gradients exist, so flat regions would leave the synthetic
    ground truth unobservable there. Returns (image in [0,1], mask with
    ring label 1 and core label 2).
    """
    from .autodiff import _corr1d_reflect, gaussian_kernel1d

    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 + rng.uniform(-size / 16, size / 16)
    cy = size / 2 + rng.uniform(-size / 16, size / 16)
    r = np.hypot(xx - cx, yy - cy)
    r_core = size * rng.uniform(0.10, 0.13)
    r_ring = r_core + size * rng.uniform(0.08, 0.11)

    # multi-frequency background texture: gradients everywhere
    img = np.full((size, size), 0.35)
    for _ in range(3):
        fx, fy = rng.uniform(1.0, 4.0, 2)
        img += rng.uniform(0.04, 0.09) \
            * np.sin(2 * np.pi * fx * xx / size + rng.uniform(0, np.pi)) \
            * np.cos(2 * np.pi * fy * yy / size + rng.uniform(0, np.pi))
    for _ in range(14):
        bx, by = rng.uniform(0, size, 2)
        bs = rng.uniform(size / 16, size / 6)
        img += rng.uniform(-0.16, 0.16) * np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2 * bs * bs))

    # mild smooth modulation inside the structures, strong step at borders
    k3 = gaussian_kernel1d(3.0).astype(np.float64)

    def smooth_noise():
        n = rng.standard_normal((size, size))
        n = _corr1d_reflect(_corr1d_reflect(n, k3, 0), k3, 1)
        return n / max(np.abs(n).max(), 1e-12)

    img = np.where(r < r_ring, 0.82 + 0.08 * smooth_noise(), img)
    img = np.where(r < r_core, 0.45 + 0.08 * smooth_noise(), img)

    k = gaussian_kernel1d(1.5).astype(np.float64)
    img = _corr1d_reflect(_corr1d_reflect(img, k, 0), k, 1)
    img = (img - img.min()) / (img.max() - img.min())

    mask = np.zeros((size, size), dtype=np.uint8)
    mask[r < r_ring] = 1
    mask[r < r_core] = 2
    return img.astype(np.float32), mask


@dataclass
class SyntheticPair:
    fixed: np.ndarray
    moving: np.ndarray
    fixed_mask: np.ndarray
    moving_mask: np.ndarray
    gt_field: np.ndarray  # generates moving from fixed: moving(x) = fixed(gt(x))
    gt_inverse: np.ndarray  # the field a forward registration should recover
    seed: int = 0
    amplitude_px: float = 0.0
    sigma_px: float = 0.0


def make_synthetic_pair(base, base_mask, velocity, seed=0, amplitude_px=0.0, sigma_px=0.0):
    """Warp a phantom through exp(velocity) into a ground-truth pair."""
    base = np.asarray(base, dtype=np.float32)
    base_mask = np.asarray(base_mask, dtype=np.uint8)
    velocity = np.asarray(velocity, dtype=np.float32)
    if base.shape != base_mask.shape or velocity.shape[2:] != base.shape:
        raise ContractViolation("make_synthetic_pair: extents differ")
    gt = exp_velocity(constant(velocity))
    gt_inv = exp_velocity(constant(-velocity))
    if np.any(jacobian_det(gt) <= 0):
        raise ContractViolation("generated ground-truth field folds")
    moving = warp_image(constant(base[None, None]), gt).data[0, 0].copy()
    moving_mask = warp_mask_nearest(base_mask, gt)
    return SyntheticPair(
        fixed=base,
        moving=moving,
        fixed_mask=base_mask,
        moving_mask=moving_mask,
        gt_field=gt.data.copy(),
        gt_inverse=gt_inv.data.copy(),
        seed=seed,
        amplitude_px=amplitude_px,
        sigma_px=sigma_px,
    )


def generate_pair(seed, size=64, amplitude_px=6.0, sigma_px=8.0):
    """Seeded phantom pair: one call per acceptance-suite case."""
    base, mask = make_phantom(size, seed=seed)
    v = random_smooth_velocity(seed + 1000, amplitude_px, sigma_px, (size, size))
    return make_synthetic_pair(base, mask, v, seed=seed,
                               amplitude_px=amplitude_px, sigma_px=sigma_px)
