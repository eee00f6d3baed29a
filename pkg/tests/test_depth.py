"""Depth calibration: affine stage, residual refiner, corruption oracle, fits."""

import numpy as np
import pytest

from nutriscope import tensor as T
from nutriscope.depth import (AffineCalibration, CorruptingDepthProvider,
                              DepthAdapter, FileDepthProvider, ResidualRefiner,
                              apply_affine, corrupt_depth,
                              fit_affine_closed_form, make_provider,
                              normalize_depth, smooth_field)
from nutriscope.errors import (DegenerateInputError, DimensionError,
                               ParameterError)
from nutriscope.tensor import Tensor

from helpers import directional_grad_check, leaf, rng


class TestAffine:
    def test_identity_at_init(self):
        cal = AffineCalibration()
        d = Tensor(rng(1).uniform(0.2, 0.8, size=(2, 1, 4, 4)))
        np.testing.assert_array_equal(apply_affine(d, cal).data, d.data)

    def test_constant_map_arithmetic(self):
        cal = AffineCalibration()
        cal.scale.data = np.asarray(2.0)
        cal.shift.data = np.asarray(0.5)
        d = Tensor(np.ones((1, 1, 3, 3)))
        np.testing.assert_allclose(apply_affine(d, cal).data, 2.5)

    def test_gradient_linearity(self):
        # d(sum of scaled map)/d(scale) equals the map's own sum
        cal = AffineCalibration()
        d = Tensor(rng(2).uniform(0, 1, size=(2, 1, 5, 5)))
        T.tsum(apply_affine(d, cal)).backward()
        assert abs(float(cal.scale.grad) - d.data.sum()) < 1e-9
        assert abs(float(cal.shift.grad) - d.data.size) < 1e-9

    def test_affine_equivariance(self):
        cal = AffineCalibration()
        cal.scale.data = np.asarray(1.7)
        cal.shift.data = np.asarray(0.3)
        d = Tensor(rng(3).uniform(0.1, 1.0, size=(1, 1, 6, 6)))
        for c in (0.5, 2.0, 4.0):
            lhs = apply_affine(Tensor(c * d.data), cal).data
            rhs = c * apply_affine(d, cal).data + (1 - c) * 0.3
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)


class TestRefiner:
    def test_zero_at_init(self):
        refiner = ResidualRefiner(rng(4))
        d = Tensor(rng(5).uniform(size=(2, 1, 8, 8)))
        np.testing.assert_array_equal(refiner.forward(d).data, 0.0)

    @pytest.mark.parametrize("size", [7, 16, 33])
    def test_shape_preserved(self, size):
        refiner = ResidualRefiner(rng(6))
        d = Tensor(np.zeros((1, 1, size, size)))
        assert refiner.forward(d).shape == (1, 1, size, size)

    def test_channel_check(self):
        refiner = ResidualRefiner(rng(7))
        with pytest.raises(DimensionError):
            refiner.forward(Tensor(np.zeros((1, 2, 4, 4))))

    def test_gradients(self):
        refiner = ResidualRefiner(rng(8))
        # give the zero-initialized final layer signal so all grads flow
        refiner.w3.data = rng(9).normal(size=refiner.w3.data.shape) * 0.1
        d = leaf(rng(10).uniform(size=(2, 1, 6, 6)))
        params = [d] + refiner.parameters()
        w = T.constant(rng(11).normal(size=(2, 1, 6, 6)))
        directional_grad_check(
            lambda: T.tsum(T.mul(refiner.forward(d), w)), params, tol=1e-4
        )


class TestAdapter:
    def test_identity_at_init_exact(self):
        adapter = DepthAdapter(rng(12))
        d = Tensor(rng(13).uniform(0.2, 0.7, size=(2, 1, 9, 9)))
        np.testing.assert_array_equal(adapter.forward(d).data, d.data)

    def test_normalize_depth_range(self):
        d = Tensor(rng(14).uniform(2.0, 9.0, size=(3, 1, 6, 6)))
        out = normalize_depth(d).data
        for i in range(3):
            assert abs(out[i].min()) < 1e-6
            assert abs(out[i].max() - 1.0) < 1e-6

    def test_normalize_flat_map_is_zero(self):
        out = normalize_depth(Tensor(np.full((1, 1, 4, 4), 3.0)))
        np.testing.assert_allclose(out.data, 0.0)


class TestCorruption:
    def test_identity(self):
        gt = rng(15).uniform(0.3, 0.6, size=(1, 8, 8))
        np.testing.assert_array_equal(corrupt_depth(gt, 1.0, 0.0), gt)

    def test_affine_inverse_exact(self):
        gt = rng(16).uniform(0.25, 0.75, size=(1, 8, 8))
        mono = corrupt_depth(gt, 2.0, 0.5)
        cal = AffineCalibration()
        cal.scale.data = np.asarray(2.0)
        cal.shift.data = np.asarray(0.5)
        restored = apply_affine(Tensor(mono), cal).data
        np.testing.assert_array_equal(restored, gt)

    def test_zero_scale_rejected(self):
        with pytest.raises(ParameterError):
            corrupt_depth(np.ones((2, 2)), 0.0, 0.0)

    def test_smooth_field_is_unit_amplitude_and_deterministic(self):
        f1 = smooth_field(16, 16, seed=5)
        f2 = smooth_field(16, 16, seed=5)
        np.testing.assert_array_equal(f1, f2)
        assert abs(np.abs(f1).max() - 1.0) < 1e-12

    def test_closed_form_fit_recovers_corruption(self):
        gt = rng(17).uniform(0.2, 0.8, size=(1, 16, 16))
        mono = corrupt_depth(gt, 2.0, 0.5)
        alpha, beta = fit_affine_closed_form(mono, gt)
        assert abs(alpha - 2.0) < 1e-6
        assert abs(beta - 0.5) < 1e-6


class TestClosedFormFit:
    def test_identity_line(self):
        x = rng(18).uniform(size=100)
        alpha, beta = fit_affine_closed_form(x, x)
        assert abs(alpha - 1.0) < 1e-12 and abs(beta) < 1e-12

    def test_exact_line(self):
        x = rng(19).uniform(size=50)
        alpha, beta = fit_affine_closed_form(x, 3.0 * x + 2.0)
        assert abs(alpha - 3.0) < 1e-9 and abs(beta - 2.0) < 1e-9

    def test_noisy_line_statistical(self):
        gen = rng(20)
        x = gen.uniform(0, 1, size=10_000)
        y = 1.7 * x + 0.4 + gen.normal(0, 0.01, size=x.size)
        alpha, beta = fit_affine_closed_form(x, y)
        assert abs(alpha - 1.7) < 1e-2 and abs(beta - 0.4) < 1e-2

    def test_constant_input_rejected(self):
        with pytest.raises(DegenerateInputError):
            fit_affine_closed_form(np.ones(10), np.arange(10.0))


class TestGradientFitMatchesClosedForm:
    def test_affine_recovery_by_descent(self):
        # L2 training of (scale, shift) against ground truth must land within
        # 2% of the ordinary-least-squares solution
        gen = rng(21)
        gt = gen.uniform(0.3, 0.7, size=(4, 1, 12, 12))
        mono = corrupt_depth(gt, 2.0, 0.5)
        alpha_hat, beta_hat = fit_affine_closed_form(mono, gt)
        cal = AffineCalibration()
        lr = 0.05
        m = np.zeros(2)
        v = np.zeros(2)
        for t in range(1, 1001):
            pred = apply_affine(Tensor(mono), cal)
            diff = T.sub(pred, T.constant(gt))
            loss = T.tmean(T.mul(diff, diff))
            cal.zero_grad()
            loss.backward()
            g = np.array([float(cal.scale.grad), float(cal.shift.grad)])
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9 ** t)
            vh = v / (1 - 0.999 ** t)
            update = lr * mh / (np.sqrt(vh) + 1e-8)
            cal.scale.data = cal.scale.data - update[0]
            cal.shift.data = cal.shift.data - update[1]
        assert abs(float(cal.scale.data) - alpha_hat) / abs(alpha_hat) < 0.02
        assert abs(float(cal.shift.data) - beta_hat) / abs(beta_hat) < 0.02


class TestResidualNeverHurts:
    def test_refiner_at_most_marginally_worse_than_affine_only(self):
        # affine corruption plus a noise floor (pure affine is exactly
        # realizable, so its L2 underflows to zero and ratios degenerate);
        # the refiner must not degrade the converged fit materially
        gen = rng(30)
        gt = gen.uniform(0.35, 0.65, size=(2, 1, 12, 12))
        mono = corrupt_depth(gt, 2.0, 0.5, noise_sd=0.01, seed=7)

        def final_l2(use_refiner):
            adapter = DepthAdapter(np.random.Generator(np.random.PCG64(1)),
                                   use_refiner=use_refiner)
            from nutriscope.training import Adam
            adam = Adam(list(adapter.named_parameters()), lr=0.02)
            x = Tensor(mono)
            target = T.constant(gt)
            loss_value = None
            for _ in range(1200):
                diff = T.sub(adapter.forward(x), target)
                loss = T.tmean(T.mul(diff, diff))
                adam.zero_grad()
                loss.backward()
                adam.step()
                loss_value = loss.item()
            return loss_value

        affine_only = final_l2(False)
        with_refiner = final_l2(True)
        assert with_refiner <= 1.05 * affine_only


class TestProviders:
    def test_file_provider_returns_stored_depth(self):
        provider = FileDepthProvider(max_depth=1.0)
        rgb = np.zeros((2, 3, 4, 4))
        depth = rng(22).uniform(0.1, 0.9, size=(2, 1, 4, 4))
        out = provider.infer(rgb, context={"depth": depth})
        np.testing.assert_array_equal(out, depth)

    def test_file_provider_requires_context(self):
        with pytest.raises(DegenerateInputError):
            FileDepthProvider().infer(np.zeros((1, 3, 4, 4)))

    def test_corrupting_provider_is_deterministic_per_seed(self):
        provider = CorruptingDepthProvider(scale=1.5, shift=0.1,
                                           distortion_amp=0.2, noise_sd=0.01)
        rgb = np.zeros((2, 3, 8, 8))
        depth = rng(23).uniform(0.3, 0.6, size=(2, 1, 8, 8))
        ctx = {"depth": depth, "seeds": np.array([11, 12])}
        out1 = provider.infer(rgb, context=ctx)
        out2 = provider.infer(rgb, context=ctx)
        np.testing.assert_array_equal(out1, out2)
        assert not np.array_equal(out1[0], out1[1])

    def test_provider_output_clipped_to_max(self):
        provider = CorruptingDepthProvider(scale=0.1, shift=0.0, max_depth=1.0)
        depth = np.full((1, 1, 4, 4), 0.9)
        out = provider.infer(np.zeros((1, 3, 4, 4)), context={"depth": depth})
        assert out.max() <= 1.0

    def test_provider_shape_matches_image(self):
        provider = FileDepthProvider()
        with pytest.raises(DimensionError):
            provider.infer(np.zeros((1, 3, 8, 8)),
                           context={"depth": np.zeros((1, 1, 4, 4))})

    def test_make_provider_unknown(self):
        with pytest.raises(ParameterError):
            make_provider("oracle")
