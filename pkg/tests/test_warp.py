import numpy as np
import pytest

import diffreg.autodiff as ad
from diffreg import warp
from diffreg.autodiff import ContractViolation, Tensor

from conftest import fd_gradcheck, rand_tensor, random_smooth_field


def euler_flow(v, steps=200):
    """Reference flow integrator: phi' = v(phi), phi(0) = x."""
    h, w = v.shape[2], v.shape[3]
    phi = ad.constant(warp.identity_field(h, w))
    vt = ad.constant(v)
    for _ in range(steps):
        step = ad.bilinear_sample(vt, phi)
        phi = ad.add(phi, ad.mul(step, 1.0 / steps))
    return phi.data


def epe_px(a, b):
    h, w = a.shape[2], a.shape[3]
    dx = (a[0, 0] - b[0, 0]) * (w - 1) / 2.0
    dy = (a[0, 1] - b[0, 1]) * (h - 1) / 2.0
    return np.hypot(dx, dy)


class TestCompose:
    def test_identity_is_neutral(self):
        grid = Tensor(warp.identity_field(9, 7))
        f = Tensor(random_smooth_field(0, 2.0, 3.0, 9, 7) + warp.identity_field(9, 7))
        np.testing.assert_allclose(warp.compose(f, grid).data, f.data, atol=1e-5)
        np.testing.assert_allclose(warp.compose(grid, f).data, f.data, atol=1e-5)

    def test_constant_shift_adds(self):
        # two pure translations compose into their sum away from the border
        h, w = 11, 11
        grid = warp.identity_field(h, w)
        shift_a = np.zeros_like(grid)
        shift_a[0, 0] = 2.0 * 2 / (w - 1)  # 2 px right
        shift_b = np.zeros_like(grid)
        shift_b[0, 1] = 1.0 * 2 / (h - 1)  # 1 px down
        fa = Tensor(grid + shift_a)
        fb = Tensor(grid + shift_b)
        out = warp.compose(fa, fb).data
        expected = grid + shift_a + shift_b
        np.testing.assert_allclose(out[:, :, 2:-2, 2:-2], expected[:, :, 2:-2, 2:-2],
                                   atol=1e-5)

    def test_extent_mismatch(self):
        with pytest.raises(ContractViolation):
            warp.compose(Tensor(warp.identity_field(8, 8)),
                         Tensor(warp.identity_field(8, 9)))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        base = warp.identity_field(8, 8) * 0.85
        a = Tensor(base + rng.uniform(0.01, 0.03, base.shape).astype(np.float32),
                   requires_grad=True)
        b = Tensor(base + rng.uniform(-0.03, -0.01, base.shape).astype(np.float32),
                   requires_grad=True)
        r = Tensor(rng.uniform(0.5, 1.5, base.shape).astype(np.float32))
        fd_gradcheck(lambda a, b: ad.t_sum(ad.mul(warp.compose(a, b), r)),
                     [a, b], rel_tol=2e-2, h=5e-3, max_coords=20)


class TestExpVelocity:
    def test_zero_velocity_is_identity(self):
        v = Tensor(np.zeros((1, 2, 8, 8), np.float32))
        np.testing.assert_array_equal(warp.exp_velocity(v).data,
                                      warp.identity_field(8, 8))

    def test_num_squarings(self):
        # half-pixel threshold at 16x16: pixel = 2/16, threshold 1/16
        v = np.zeros((1, 2, 16, 16), np.float32)
        assert warp.num_squarings(v, 16, 16) == 0
        v[0, 0, 0, 0] = 1.0 / 16
        assert warp.num_squarings(v, 16, 16) == 0
        v[0, 0, 0, 0] = 1.0 / 8
        assert warp.num_squarings(v, 16, 16) == 1
        v[0, 0, 0, 0] = 1.0
        assert warp.num_squarings(v, 16, 16) == 4
        v[0, 0, 0, 0] = 1e6
        assert warp.num_squarings(v, 16, 16) == warp.MAX_SQUARINGS

    def test_matches_euler_oracle(self):
        # independent 200-step flow integration, small smooth fields
        for seed in range(5):
            v = random_smooth_field(seed, 2.0, 4.0, 32, 32)
            got = warp.exp_velocity(Tensor(v)).data
            ref = euler_flow(v)
            assert epe_px(got, ref).mean() < 0.05

    def test_forward_backward_cancel(self):
        v = random_smooth_field(7, 3.0, 5.0, 32, 32)
        f = warp.exp_velocity(Tensor(v))
        b = warp.exp_velocity(Tensor(-v))
        comp = warp.compose(b, f).data
        resid = epe_px(comp, warp.identity_field(32, 32))
        assert resid[4:-4, 4:-4].mean() < 0.05

    def test_gradient(self):
        v = Tensor(random_smooth_field(3, 1.5, 3.0, 8, 8), requires_grad=True)
        rng = np.random.default_rng(4)
        r = Tensor(rng.uniform(0.5, 1.5, v.shape).astype(np.float32))
        fd_gradcheck(lambda v: ad.t_sum(ad.mul(warp.exp_velocity(v), r)),
                     [v], rel_tol=2e-2, h=2e-3, max_coords=20)


class TestUpsampleDeformation:
    def test_identity_maps_to_identity(self):
        d = Tensor(warp.identity_field(8, 8))
        out = warp.upsample_deformation(d, 16, 16)
        np.testing.assert_allclose(out.data, warp.identity_field(16, 16), atol=1e-6)

    def test_constant_displacement_preserved(self):
        d = warp.identity_field(8, 8)
        d[0, 0] += 0.1
        out = warp.upsample_deformation(Tensor(d), 15, 15).data
        np.testing.assert_allclose(out - warp.identity_field(15, 15),
                                   np.broadcast_to([[[0.1]], [[0.0]]], (1, 2, 15, 15)),
                                   atol=1e-5)

    def test_downsample_rejected(self):
        with pytest.raises(ContractViolation):
            warp.upsample_deformation(Tensor(warp.identity_field(8, 8)), 4, 8)


class TestSmoothVelocity:
    def test_sigma_zero_identity(self):
        v = Tensor(random_smooth_field(0, 2.0, 2.0, 8, 8))
        assert warp.smooth_velocity(v, 0.0) is v

    def test_reduces_total_variation(self):
        rng = np.random.default_rng(5)
        v = Tensor(rng.standard_normal((1, 2, 16, 16)).astype(np.float32))
        s = warp.smooth_velocity(v, 2.0).data
        tv = lambda a: np.abs(np.diff(a, axis=2)).sum() + np.abs(np.diff(a, axis=3)).sum()
        assert tv(s) < tv(v.data)

    def test_negative_sigma_rejected(self):
        with pytest.raises(ContractViolation):
            warp.smooth_velocity(Tensor(np.zeros((1, 2, 8, 8), np.float32)), -1.0)


class TestWarps:
    def test_warp_image_identity(self):
        rng = np.random.default_rng(6)
        img = Tensor(rng.uniform(0, 1, (1, 1, 9, 9)).astype(np.float32))
        out = warp.warp_image(img, Tensor(warp.identity_field(9, 9)))
        np.testing.assert_allclose(out.data, img.data, atol=1e-6)

    def test_warp_image_translation(self):
        # shifting the sampling grid right by one pixel reads the next column
        img = np.arange(81, dtype=np.float32).reshape(1, 1, 9, 9)
        d = warp.identity_field(9, 9)
        d[0, 0] += 2.0 / 8
        out = warp.warp_image(Tensor(img), Tensor(d)).data
        np.testing.assert_allclose(out[0, 0, :, :-1], img[0, 0, :, 1:], atol=1e-5)

    def test_warp_mask_nearest_translation(self):
        mask = np.zeros((9, 9), np.uint8)
        mask[4, 5] = 3
        d = warp.identity_field(9, 9)
        d[0, 0] += 2.0 / 8
        out = warp.warp_mask_nearest(mask, d)
        assert out[4, 4] == 3
        assert out[4, 5] == 0

    def test_extent_mismatch(self):
        with pytest.raises(ContractViolation):
            warp.warp_image(Tensor(np.zeros((1, 1, 8, 8), np.float32)),
                            Tensor(warp.identity_field(9, 9)))


class TestJacobian:
    def test_identity_is_one(self):
        np.testing.assert_allclose(
            warp.jacobian_det(warp.identity_field(8, 8)), 1.0, atol=1e-6)

    def test_uniform_scale(self):
        # phi(x) = 0.5 x contracts both axes: det = 0.25 everywhere
        d = warp.identity_field(9, 9) * 0.5
        np.testing.assert_allclose(warp.jacobian_det(d), 0.25, atol=1e-6)

    def test_fold_detected(self):
        d = warp.identity_field(9, 9)
        d[0, 0, 4, 4] = d[0, 0, 4, 6]
        d[0, 0, 4, 6] = -abs(d[0, 0, 4, 4])  # swap ordering along x
        det = warp.jacobian_det(d)
        assert det.min() <= 0

    def test_displacement_pixels(self):
        d = warp.identity_field(9, 9)
        d[0, 1] += 3.0 * 2 / 8
        u = warp.displacement_pixels(d)
        np.testing.assert_allclose(u[0], 0.0, atol=1e-5)
        np.testing.assert_allclose(u[1], 3.0, atol=1e-5)

    def test_too_small(self):
        with pytest.raises(ContractViolation):
            warp.jacobian_det(warp.identity_field(2, 8))
