"""Per-pair optimization: recursive multiresolution deformation
construction and the outer Adam loop.

Levels are indexed 1 (finest, the original image) to K (coarsest). The
coarsest level is initialized from a zero deformation input; each finer
level upsamples the previous field, predicts a velocity correction,
smooths it, exponentiates it and composes. Weights are shared across
levels and both directions; the backward direction negates the
coordinate channels.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import warp
from .autodiff import ContractViolation, Tape
from .fcn import fcn_forward, init_params
from .losses import LossConfig, total_loss
from .optim import Adam
from .pyramid import coord_grid, gaussian_pyramid


@dataclass
class RegistrationConfig:
    levels: int = 2
    iterations: int = 800
    lr: float = 5e-4
    lambda_weight: float = 5.0
    alpha: float | None = None  # defaults to 1/levels
    gamma: float | None = None  # defaults to lambda_weight/levels
    loss_mode: str = "ssim+mi"
    sigma: float = 1.0  # velocity smoothing, pixels, per level
    bidirectional: bool = True
    seed: int = 0
    mi_bins: int = 16
    ssim_window: int = 11
    # "additive" replaces composition with D_up + EXP-displacement; kept
    # only for ablation and loses the diffeomorphism guarantee.
    update_rule: str = "compositional"

    def __post_init__(self):
        if self.levels < 1:
            raise ContractViolation("levels must be >= 1")
        if self.iterations < 1:
            raise ContractViolation("iterations must be >= 1")
        if self.alpha is None:
            self.alpha = 1.0 / self.levels
        if self.gamma is None:
            self.gamma = self.lambda_weight / self.levels
        if self.update_rule not in ("compositional", "additive"):
            raise ContractViolation("update_rule must be 'compositional' or 'additive'")

    def loss_config(self):
        return LossConfig(mode=self.loss_mode, alpha=self.alpha, gamma=self.gamma,
                          mi_bins=self.mi_bins, ssim_window=self.ssim_window)

    def to_dict(self):
        return asdict(self)


@dataclass
class RegistrationResult:
    forward_field: np.ndarray  # [1,2,H,W] absolute normalized coordinates
    backward_field: np.ndarray | None
    warped_moving: np.ndarray  # [H,W]
    warped_fixed: np.ndarray | None
    loss_trace: list[float] = field(default_factory=list)
    elapsed_seconds: float = 0.0
    config: RegistrationConfig | None = None


def build_multires_deformations(params, grids, cfg):
    """Deformation fields per level and direction, finest first.

    grids: identity-coordinate tensors [1,2,H,W], finest (index 0) to
    coarsest (index K-1). Every intermediate participates in
    differentiation.
    """
    k = len(grids)
    directions = ("F", "B") if cfg.bidirectional else ("F",)
    fields = {}
    for direction in directions:
        sign = 1.0 if direction == "F" else -1.0
        coords = [ad.mul(g, sign) for g in grids]
        v = fcn_forward(params, coords[k - 1], ad.constant(np.zeros(grids[k - 1].shape, np.float32)))
        v = warp.smooth_velocity(v, cfg.sigma)
        d = warp.exp_velocity(v)
        per_level = [None] * k
        per_level[k - 1] = d
        for t in range(k - 2, -1, -1):
            h, w = grids[t].shape[2], grids[t].shape[3]
            d_up = warp.upsample_deformation(per_level[t + 1], h, w)
            v = fcn_forward(params, coords[t], d_up)
            v = warp.smooth_velocity(v, cfg.sigma)
            if cfg.update_rule == "compositional":
                per_level[t] = warp.compose(d_up, warp.exp_velocity(v))
            else:
                grid = ad.constant(grids[t].data)
                per_level[t] = ad.add(d_up, ad.sub(warp.exp_velocity(v), grid))
        fields[direction] = per_level
    if not cfg.bidirectional:
        fields["B"] = None
    return fields


class RegistrationError(RuntimeError):
    pass


def register(moving, fixed, cfg=None):
    """Optimize the network from scratch for one image pair."""
    cfg = cfg or RegistrationConfig()
    moving = np.asarray(moving, dtype=np.float32)
    fixed = np.asarray(fixed, dtype=np.float32)
    if moving.shape != fixed.shape:
        raise ContractViolation(
            f"moving {moving.shape} and fixed {fixed.shape} extents differ")
    start = time.perf_counter()

    moving_pyr = gaussian_pyramid(moving, cfg.levels)
    fixed_pyr = gaussian_pyramid(fixed, cfg.levels)
    moving_t = [ad.constant(m[None, None]) for m in moving_pyr]
    fixed_t = [ad.constant(f[None, None]) for f in fixed_pyr]
    grids = [ad.constant(coord_grid(*m.shape)[None]) for m in moving_pyr]

    params = init_params(cfg.seed)
    leaves = params.all()
    optimizer = Adam(leaves, lr=cfg.lr)
    loss_cfg = cfg.loss_config()

    trace = []
    fields = None
    for it in range(cfg.iterations):
        params.zero_grad()
        with Tape() as tape:
            fields = build_multires_deformations(params, grids, cfg)
            loss = total_loss(fixed_t, moving_t, fields, grids, loss_cfg,
                              bidirectional=cfg.bidirectional)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise RegistrationError(f"non-finite loss at iteration {it}")
            trace.append(loss_value)
            tape.backward(loss, leaves=leaves)
        optimizer.step()

    # final fields from the optimized parameters, outside any tape
    fields = build_multires_deformations(params, grids, cfg)
    d_f = fields["F"][0]
    warped_moving = warp.warp_image(moving_t[0], d_f).data[0, 0].copy()
    if cfg.bidirectional:
        d_b = fields["B"][0]
        backward_field = d_b.data.copy()
        warped_fixed = warp.warp_image(fixed_t[0], d_b).data[0, 0].copy()
    else:
        backward_field = None
        warped_fixed = None
    return RegistrationResult(
        forward_field=d_f.data.copy(),
        backward_field=backward_field,
        warped_moving=warped_moving,
        warped_fixed=warped_fixed,
        loss_trace=trace,
        elapsed_seconds=time.perf_counter() - start,
        config=cfg,
    )
