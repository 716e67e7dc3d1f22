"""Scikit-learn style wrapper around the per-pair registration engine."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .autodiff import ContractViolation, constant
from .engine import RegistrationConfig, register
from .warp import warp_image, warp_mask_nearest


def check_image(image, name="image"):
    """Validate a single-channel [0,1] raster and return it as float32."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim != 2:
        raise ContractViolation(f"{name} must be a 2-D array")
    if arr.shape[0] < 8 or arr.shape[1] < 8:
        raise ContractViolation(f"{name} must be at least 8x8 pixels")
    if not np.all(np.isfinite(arr)):
        raise ContractViolation(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractViolation(f"{name} intensities must lie in [0,1]")
    return arr


class DiffeomorphicRegistration(BaseEstimator, TransformerMixin):
    """Pairwise diffeomorphic registration as a fit/transform estimator.

    fit(moving, fixed) optimizes a small convolutional network from
    scratch for that pair; transform(image) then resamples an image (or,
    with nearest-neighbor sampling, a label mask) through the recovered
    forward field, and inverse_transform uses the backward field.
    """

    def __init__(self, levels=2, iterations=800, lr=5e-4, lambda_weight=5.0,
                 loss_mode="ssim+mi", sigma=1.0, bidirectional=True, seed=0):
        self.levels = levels
        self.iterations = iterations
        self.lr = lr
        self.lambda_weight = lambda_weight
        self.loss_mode = loss_mode
        self.sigma = sigma
        self.bidirectional = bidirectional
        self.seed = seed

    def _config(self):
        return RegistrationConfig(
            levels=self.levels, iterations=self.iterations, lr=self.lr,
            lambda_weight=self.lambda_weight, loss_mode=self.loss_mode,
            sigma=self.sigma, bidirectional=self.bidirectional, seed=self.seed)

    def fit(self, X, y):
        """Register moving image X onto fixed image y."""
        moving = check_image(X, "moving")
        fixed = check_image(y, "fixed")
        result = register(moving, fixed, self._config())
        self.result_ = result
        self.forward_field_ = result.forward_field
        self.backward_field_ = result.backward_field
        self.loss_trace_ = result.loss_trace
        return self

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise RuntimeError("estimator is not fitted; call fit(moving, fixed) first")

    def transform(self, X, mask=False):
        self._check_fitted()
        if mask:
            return warp_mask_nearest(np.asarray(X), self.forward_field_)
        arr = check_image(X, "image")
        return warp_image(constant(arr[None, None]), constant(self.forward_field_)).data[0, 0]

    def inverse_transform(self, X, mask=False):
        self._check_fitted()
        if self.backward_field_ is None:
            raise RuntimeError("no backward field: estimator was fitted unidirectionally")
        if mask:
            return warp_mask_nearest(np.asarray(X), self.backward_field_)
        arr = check_image(X, "image")
        return warp_image(constant(arr[None, None]), constant(self.backward_field_)).data[0, 0]

    def fit_transform(self, X, y):
        return self.fit(X, y).transform(X)
