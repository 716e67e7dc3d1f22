import numpy as np
import pytest

from diffreg.autodiff import ContractViolation, Tensor, constant
from diffreg.engine import (RegistrationConfig, RegistrationResult,
                            build_multires_deformations, register)
from diffreg.fcn import init_params
from diffreg.pyramid import coord_grid, gaussian_pyramid
from diffreg.warp import identity_field, jacobian_det


def grids_for(shape, levels):
    pyr = gaussian_pyramid(np.zeros(shape, np.float32), levels)
    return [constant(coord_grid(*p.shape)[None]) for p in pyr]


class TestConfig:
    def test_derived_weights(self):
        cfg = RegistrationConfig(levels=2, lambda_weight=5.0)
        assert cfg.alpha == 0.5
        assert cfg.gamma == 2.5

    def test_explicit_override(self):
        cfg = RegistrationConfig(levels=2, alpha=0.1, gamma=0.0)
        assert cfg.alpha == 0.1
        assert cfg.gamma == 0.0

    def test_default_configuration(self):
        cfg = RegistrationConfig()
        assert (cfg.levels, cfg.iterations, cfg.lr, cfg.lambda_weight) == (2, 800, 5e-4, 5.0)
        assert cfg.loss_mode == "ssim+mi"
        assert cfg.bidirectional

    def test_invalid(self):
        with pytest.raises(ContractViolation):
            RegistrationConfig(levels=0)
        with pytest.raises(ContractViolation):
            RegistrationConfig(iterations=0)
        with pytest.raises(ContractViolation):
            RegistrationConfig(update_rule="momentum")


class TestBuildMultires:
    def test_zero_head_gives_identity_everywhere(self):
        params = init_params(0)
        grids = grids_for((32, 32), 2)
        cfg = RegistrationConfig(levels=2)
        fields = build_multires_deformations(params, grids, cfg)
        for direction in ("F", "B"):
            for level, grid in zip(fields[direction], grids):
                np.testing.assert_allclose(level.data, grid.data, atol=1e-6)

    def test_single_level(self):
        params = init_params(1)
        grids = grids_for((16, 16), 1)
        cfg = RegistrationConfig(levels=1)
        fields = build_multires_deformations(params, grids, cfg)
        assert len(fields["F"]) == 1
        assert fields["F"][0].shape == (1, 2, 16, 16)

    def test_unidirectional_has_no_backward(self):
        params = init_params(0)
        grids = grids_for((16, 16), 1)
        cfg = RegistrationConfig(levels=1, bidirectional=False)
        fields = build_multires_deformations(params, grids, cfg)
        assert fields["B"] is None

    def test_random_small_weights_stay_diffeomorphic(self):
        grids = grids_for((32, 32), 2)
        cfg = RegistrationConfig(levels=2)
        for seed in range(50):
            params = init_params(seed)
            rng = np.random.default_rng(seed)
            params.w4.data[:] = rng.uniform(-0.01, 0.01, params.w4.shape).astype(np.float32)
            fields = build_multires_deformations(params, grids, cfg)
            for direction in ("F", "B"):
                for level in fields[direction]:
                    assert jacobian_det(level.data).min() > 0, (seed, direction)


class TestRegister:
    def test_extent_mismatch(self):
        with pytest.raises(ContractViolation):
            register(np.zeros((16, 16), np.float32), np.zeros((16, 17), np.float32))

    def test_result_contract_small_run(self):
        rng = np.random.default_rng(0)
        fixed = rng.uniform(0, 1, (16, 16)).astype(np.float32)
        moving = rng.uniform(0, 1, (16, 16)).astype(np.float32)
        cfg = RegistrationConfig(levels=1, iterations=3, ssim_window=11)
        result = register(moving, fixed, cfg)
        assert isinstance(result, RegistrationResult)
        assert len(result.loss_trace) == 3
        assert result.forward_field.shape == (1, 2, 16, 16)
        assert result.backward_field.shape == (1, 2, 16, 16)
        assert result.warped_moving.shape == (16, 16)
        assert np.all(np.isfinite(result.forward_field))
        assert result.elapsed_seconds > 0
        assert result.config is cfg

    def test_unidirectional_small_run(self):
        rng = np.random.default_rng(1)
        fixed = rng.uniform(0, 1, (16, 16)).astype(np.float32)
        cfg = RegistrationConfig(levels=1, iterations=2, bidirectional=False)
        result = register(fixed, fixed, cfg)
        assert result.backward_field is None
        assert result.warped_fixed is None

    def test_loss_trace_deterministic(self):
        rng = np.random.default_rng(2)
        fixed = rng.uniform(0, 1, (16, 16)).astype(np.float32)
        moving = rng.uniform(0, 1, (16, 16)).astype(np.float32)
        cfg = dict(levels=1, iterations=5, seed=3)
        a = register(moving, fixed, RegistrationConfig(**cfg))
        b = register(moving, fixed, RegistrationConfig(**cfg))
        assert a.loss_trace == b.loss_trace
        np.testing.assert_array_equal(a.forward_field, b.forward_field)

    def test_mse_mode_descends(self):
        # blurred random pattern vs its 1 px shift: loss should drop
        from diffreg.autodiff import _corr1d_reflect, gaussian_kernel1d

        rng = np.random.default_rng(3)
        img = rng.uniform(0, 1, (24, 24))
        k = gaussian_kernel1d(1.5)
        img = _corr1d_reflect(_corr1d_reflect(img, k, 0), k, 1).astype(np.float32)
        moving = np.roll(img, 1, axis=1)
        cfg = RegistrationConfig(levels=1, iterations=60, loss_mode="mse",
                                 lambda_weight=0.0, bidirectional=False)
        result = register(moving, img, cfg)
        assert result.loss_trace[-1] < result.loss_trace[0]
