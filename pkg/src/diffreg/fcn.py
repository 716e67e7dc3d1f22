"""The small fully convolutional network producing velocity fields.

Four 5x5 stride-1 conv layers: 4 -> 24 -> 24 -> 24 -> 2 channels, ReLU
after all but the last. Input is the channel stack [x, y, phi_x, phi_y];
the backward direction negates the coordinate channels and shares all
weights. The last layer starts at exactly zero so the very first forward
pass yields identity deformations at every level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor

HIDDEN = 24
KERNEL = 5


@dataclass
class NetParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    w3: Tensor
    b3: Tensor
    w4: Tensor
    b4: Tensor

    def all(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3, self.w4, self.b4]

    def zero_grad(self):
        for p in self.all():
            p.zero_grad()


def _uniform_fan_in(rng, shape):
    fan_in = shape[1] * shape[2] * shape[3]
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_params(seed):
    """Seed-deterministic weights; layer 4 is all zeros."""
    rng = np.random.default_rng(seed)

    def param(data):
        return Tensor(data, requires_grad=True)

    return NetParams(
        w1=param(_uniform_fan_in(rng, (HIDDEN, 4, KERNEL, KERNEL))),
        b1=param(np.zeros(HIDDEN, dtype=np.float32)),
        w2=param(_uniform_fan_in(rng, (HIDDEN, HIDDEN, KERNEL, KERNEL))),
        b2=param(np.zeros(HIDDEN, dtype=np.float32)),
        w3=param(_uniform_fan_in(rng, (HIDDEN, HIDDEN, KERNEL, KERNEL))),
        b3=param(np.zeros(HIDDEN, dtype=np.float32)),
        w4=param(np.zeros((2, HIDDEN, KERNEL, KERNEL), dtype=np.float32)),
        b4=param(np.zeros(2, dtype=np.float32)),
    )


def fcn_forward(params, coords, deformation):
    """Map (coordinate grid, current deformation) to a velocity field."""
    coords = ad._as_tensor(coords)
    deformation = ad._as_tensor(deformation)
    if coords.shape[2:] != deformation.shape[2:]:
        raise ContractViolation("fcn_forward: coords and deformation extents differ")
    x = ad.concat_channels(coords, deformation)
    x = ad.relu(ad.conv2d(x, params.w1, params.b1))
    x = ad.relu(ad.conv2d(x, params.w2, params.b2))
    x = ad.relu(ad.conv2d(x, params.w3, params.b3))
    return ad.conv2d(x, params.w4, params.b4)
