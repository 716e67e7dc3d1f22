"""Differentiable similarity and consistency terms.

Every mode is a descent problem: the similarity term is mse, 1 - ssim,
or (1 - ssim) - mutual_information, so lower is always better.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import warp
from .autodiff import ContractViolation

MODES = ("mse", "ssim", "ssim+mi")

_SSIM_C1 = 1e-4  # (0.01)^2 at dynamic range 1
_SSIM_C2 = 9e-4  # (0.03)^2
_MI_EPS = 1e-12


@dataclass
class LossConfig:
    mode: str = "ssim+mi"
    alpha: float = 0.5
    gamma: float = 2.5
    mi_bins: int = 16
    ssim_window: int = 11

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolation(f"unknown loss mode '{self.mode}' (choose from {MODES})")
        if self.alpha < 0 or self.gamma < 0:
            raise ContractViolation("alpha and gamma must be non-negative")
        if self.mi_bins < 4:
            raise ContractViolation("mi_bins must be >= 4")
        if self.ssim_window % 2 != 1:
            raise ContractViolation("ssim_window must be odd")


def _check_same_extents(a, b, what):
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: extents differ ({a.shape} vs {b.shape})")


def mse(a, b):
    a, b = ad._as_tensor(a), ad._as_tensor(b)
    _check_same_extents(a, b, "mse")
    d = ad.sub(a, b)
    return ad.t_mean(ad.mul(d, d))


def _gaussian_window_kernel(size, sigma=1.5):
    r = size // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return (k / k.sum()).astype(np.float32)


def ssim(a, b, window=11):
    """Mean SSIM with a Gaussian window (sigma 1.5, reflect borders)."""
    a, b = ad._as_tensor(a), ad._as_tensor(b)
    _check_same_extents(a, b, "ssim")
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ContractViolation("ssim: image smaller than the window")
    k = _gaussian_window_kernel(window)

    def blur(t):
        return ad.separable_correlate(t, k, axes=(a.data.ndim - 2, a.data.ndim - 1))

    mu_a = blur(a)
    mu_b = blur(b)
    var_a = ad.sub(blur(ad.mul(a, a)), ad.mul(mu_a, mu_a))
    var_b = ad.sub(blur(ad.mul(b, b)), ad.mul(mu_b, mu_b))
    cov = ad.sub(blur(ad.mul(a, b)), ad.mul(mu_a, mu_b))
    num = ad.mul(ad.add(ad.mul(ad.mul(mu_a, mu_b), 2.0), _SSIM_C1),
                 ad.add(ad.mul(cov, 2.0), _SSIM_C2))
    den = ad.mul(ad.add(ad.add(ad.mul(mu_a, mu_a), ad.mul(mu_b, mu_b)), _SSIM_C1),
                 ad.add(ad.add(var_a, var_b), _SSIM_C2))
    return ad.t_mean(ad.div(num, den))


def soft_mutual_information(a, b, bins=16):
    """Parzen soft-binning MI estimate (natural log), differentiable.

    Bin centers at (k + 0.5)/B with Gaussian membership of width 1/B,
    normalized per pixel; joint distribution is the mean outer product.
    Terms with joint probability below 1e-12 are skipped.
    """
    a, b = ad._as_tensor(a), ad._as_tensor(b)
    _check_same_extents(a, b, "soft_mutual_information")
    n = a.data.size
    centers = ad.constant(((np.arange(bins) + 0.5) / bins).reshape(1, bins))
    sigma_b = 1.0 / bins

    def soft_hist(t):
        v = ad.reshape(t, (n, 1))
        d = ad.sub(v, centers)
        w = ad.exp(ad.mul(ad.mul(d, d), -1.0 / (2.0 * sigma_b * sigma_b)))
        return ad.div(w, ad.t_sum(w, axis=1, keepdims=True))

    wa = soft_hist(a)
    wb = soft_hist(b)
    joint = ad.mul(ad.matmul(ad.transpose2d(wa), wb), 1.0 / n)
    pa = ad.t_sum(joint, axis=1, keepdims=True)
    pb = ad.t_sum(joint, axis=0, keepdims=True)
    mask = (joint.data > _MI_EPS).astype(np.float32)
    keep = ad.constant(mask)
    fill = ad.constant(1.0 - mask)  # keeps log() finite on skipped terms
    log_ratio = ad.sub(ad.log(ad.add(ad.mul(joint, keep), fill)),
                       ad.log(ad.add(ad.mul(ad.mul(pa, pb), keep), fill)))
    return ad.t_sum(ad.mul(ad.mul(joint, keep), log_ratio))


def similarity(fixed, warped, cfg):
    """Dissimilarity for the configured mode; 0 is a perfect match."""
    if cfg.mode == "mse":
        return mse(fixed, warped)
    one = ad.constant(np.ones((), dtype=np.float32))
    s = ad.sub(one, ssim(fixed, warped, cfg.ssim_window))
    if cfg.mode == "ssim":
        return s
    return ad.sub(s, soft_mutual_information(fixed, warped, cfg.mi_bins))


def inverse_consistency(outer, inner, grid):
    """MSE between a composed round trip and the identity, in pixels.

    Pixel units put the term on the same footing as the similarity
    losses; in normalized coordinates it is ~1e3 times smaller and the
    optimizer ignores it.
    """
    comp = warp.compose(outer, inner)
    h, w = grid.data.shape[2], grid.data.shape[3]
    scale = ad.constant(np.array([(w - 1) / 2.0, (h - 1) / 2.0],
                                 np.float32).reshape(1, 2, 1, 1))
    d = ad.mul(ad.sub(comp, grid), scale)
    return ad.t_mean(ad.mul(d, d))


def displacement_penalty(field, grid):
    """Mean over pixels of the squared displacement norm |phi(x) - x|^2."""
    d = ad.sub(field, grid)
    sq = ad.mul(d, d)
    n_pixels = field.data.shape[2] * field.data.shape[3]
    return ad.mul(ad.t_sum(sq), 1.0 / n_pixels)


def total_loss(fixed_pyr, moving_pyr, fields, grids, cfg, bidirectional=True):
    """Multiresolution forward(-backward) objective, summed over levels.

    fixed_pyr/moving_pyr: image tensors finest -> coarsest.
    fields: {"F": [...], "B": [...]} deformation tensors per level; "B"
    may be absent in unidirectional mode.
    grids: identity-field tensors per level.
    """
    k = len(fixed_pyr)
    if len(moving_pyr) != k or len(grids) != k or len(fields["F"]) != k:
        raise ContractViolation("total_loss: missing pyramid level")
    if bidirectional and ("B" not in fields or fields["B"] is None or len(fields["B"]) != k):
        raise ContractViolation("total_loss: bidirectional mode needs backward fields")
    total = None
    for t in range(k):
        i_f, i_m, grid = fixed_pyr[t], moving_pyr[t], grids[t]
        d_f = fields["F"][t]
        term = similarity(i_f, warp.warp_image(i_m, d_f), cfg)
        if cfg.gamma > 0:
            term = ad.add(term, ad.mul(displacement_penalty(d_f, grid), cfg.gamma))
        if bidirectional:
            d_b = fields["B"][t]
            term = ad.add(term, similarity(i_m, warp.warp_image(i_f, d_b), cfg))
            term = ad.add(term, ad.mul(inverse_consistency(d_b, d_f, grid), cfg.alpha))
            term = ad.add(term, ad.mul(inverse_consistency(d_f, d_b, grid), cfg.alpha))
            if cfg.gamma > 0:
                term = ad.add(term, ad.mul(displacement_penalty(d_b, grid), cfg.gamma))
        total = term if total is None else ad.add(total, term)
    return total
