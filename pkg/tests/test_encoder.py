"""Encoder forward/backward: shapes, oracles, finite-difference gradients."""

import numpy as np
import pytest

from mrvlad import encoder as enc
from mrvlad import pyramid
from mrvlad.errors import ContractViolationError, InputTooSmallError

from test_kernels import conv_oracle


def tiny_specs(depth=5):
    return (enc.ConvLayerSpec(3, 2, 3, 4, True),
            enc.ConvLayerSpec(3, 2, 4, depth, False))


def fd_param_check(params, img, seed=0, h=1e-6, sample=None):
    """Max relative error of analytic vs central-difference parameter grads."""
    rng = np.random.default_rng(seed)
    out, cache = enc.encode_with_cache(img, params)
    w = rng.standard_normal(out.shape)
    grads, _ = enc.encoder_backward(w, cache, params)

    def loss():
        return float(np.sum(w * enc.encode(img, params)))

    max_err = 0.0
    for arrs, gs in ((params.kernels, grads.kernels), (params.biases, grads.biases)):
        for arr, g in zip(arrs, gs):
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            idx = range(flat.size) if sample is None else \
                rng.choice(flat.size, min(sample, flat.size), replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                lp = loss()
                flat[i] = orig - h
                lm = loss()
                flat[i] = orig
                fd = (lp - lm) / (2 * h)
                max_err = max(max_err,
                              abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-6))
    return max_err


class TestForward:
    def test_zero_image_zero_biases_gives_zero_tensor(self):
        params = enc.init_encoder(seed=0)
        img = np.zeros((32, 32, 3), dtype=np.float32)
        out = enc.encode(img, params)
        np.testing.assert_array_equal(out, 0.0)

    def test_stride_arithmetic_32_to_4(self):
        params = enc.init_encoder(seed=1)
        out = enc.encode(np.random.default_rng(0).random((32, 32, 3),
                                                         dtype=np.float32), params)
        assert out.shape == (4, 4, 16)
        assert params.total_stride == 8
        assert params.depth == 16

    def test_single_layer_matches_naive_convolution(self):
        rng = np.random.default_rng(2)
        spec = (enc.ConvLayerSpec(3, 1, 3, 4, False),)
        params = enc.init_encoder(spec, seed=2, dtype=np.float64)
        img = rng.random((8, 8, 3))
        got = enc.encode(img, params)
        want = conv_oracle(img, params.kernels[0], params.biases[0], 1)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_forward_is_pure(self):
        params = enc.init_encoder(seed=3)
        img = np.random.default_rng(1).random((24, 24, 3), dtype=np.float32)
        np.testing.assert_array_equal(enc.encode(img, params), enc.encode(img, params))

    def test_too_small_input_raises(self):
        params = enc.init_encoder(seed=4)
        with pytest.raises(InputTooSmallError):
            enc.encode(np.zeros((4, 4, 3), dtype=np.float32), params)

    def test_odd_sizes_follow_floor_rule(self):
        params = enc.init_encoder(tiny_specs(), seed=5)
        out = enc.encode(np.random.default_rng(2).random((13, 9, 3)), params)
        assert out.shape == (13 // 2 // 2, 9 // 2 // 2, 5)


class TestPyramidEncoding:
    def test_single_level_equals_plain_encode(self):
        params = enc.init_encoder(seed=6)
        img = np.random.default_rng(3).random((32, 32, 3), dtype=np.float32)
        p = pyramid.build_subsample_pyramid(img, pyramid.PyramidConfig(factors=(1,)))
        fp = enc.encode_pyramid(p, params)
        assert len(fp) == 1
        np.testing.assert_array_equal(fp[0][1], enc.encode(img, params))

    def test_three_level_shapes(self):
        params = enc.init_encoder(seed=7)
        img = np.random.default_rng(4).random((64, 64, 3), dtype=np.float32)
        p = pyramid.build_subsample_pyramid(img, pyramid.PyramidConfig(factors=(1, 2, 4)))
        fp = enc.encode_pyramid(p, params)
        assert [t.shape for _, t in fp] == [(8, 8, 16), (4, 4, 16), (2, 2, 16)]

    def test_duplicated_level_gives_identical_tensors(self):
        params = enc.init_encoder(seed=8)
        img = np.random.default_rng(5).random((32, 32, 3), dtype=np.float32)
        p = pyramid.ImagePyramid(levels=[(1.0, img), (2.0, img)], sigma_eff=[None, None])
        fp = enc.encode_pyramid(p, params)
        np.testing.assert_array_equal(fp[0][1], fp[1][1])

    def test_error_carries_level_index(self):
        params = enc.init_encoder(seed=9)
        img = np.random.default_rng(6).random((32, 32, 3), dtype=np.float32)
        p = pyramid.build_subsample_pyramid(img, pyramid.PyramidConfig(factors=(1, 8)))
        with pytest.raises(InputTooSmallError, match="level 1"):
            enc.encode_pyramid(p, params)

    def test_kernel_perturbation_changes_every_level(self):
        # weight sharing across resolutions
        params = enc.init_encoder(seed=10, dtype=np.float64)
        img = np.random.default_rng(7).random((64, 64, 3))
        p = pyramid.build_subsample_pyramid(img, pyramid.PyramidConfig(factors=(1, 2, 4)))
        before = [t.copy() for _, t in enc.encode_pyramid(p, params)]
        params.kernels[0][1, 1, 0, 0] += 0.25
        after = [t for _, t in enc.encode_pyramid(p, params)]
        for b, a in zip(before, after):
            assert np.max(np.abs(b - a)) > 0


class TestBackward:
    def test_zero_upstream_gradient_gives_zero_param_grads(self):
        params = enc.init_encoder(tiny_specs(), seed=11, dtype=np.float64)
        img = np.random.default_rng(8).random((12, 12, 3))
        out, cache = enc.encode_with_cache(img, params)
        grads, gin = enc.encoder_backward(np.zeros_like(out), cache, params)
        for g in grads.kernels + grads.biases:
            np.testing.assert_array_equal(g, 0.0)
        np.testing.assert_array_equal(gin, 0.0)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_gradients_match_finite_differences(self, seed):
        params = enc.init_encoder(tiny_specs(), seed=seed, dtype=np.float64)
        img = np.random.default_rng(seed).random((11, 13, 3))
        assert fd_param_check(params, img, seed=seed) < 1e-4

    def test_input_gradient_matches_finite_differences(self):
        params = enc.init_encoder(tiny_specs(), seed=12, dtype=np.float64)
        rng = np.random.default_rng(9)
        img = rng.random((9, 9, 3))
        out, cache = enc.encode_with_cache(img, params)
        w = rng.standard_normal(out.shape)
        _, gin = enc.encoder_backward(w, cache, params)
        h = 1e-6
        flat, gflat = img.reshape(-1), gin.reshape(-1)
        for i in rng.choice(flat.size, 40, replace=False):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(np.sum(w * enc.encode(img, params)))
            flat[i] = orig - h
            lm = float(np.sum(w * enc.encode(img, params)))
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-6) < 1e-4

    def test_two_level_gradient_is_sum_of_per_level_gradients(self):
        params = enc.init_encoder(tiny_specs(), seed=13, dtype=np.float64)
        rng = np.random.default_rng(10)
        img = rng.random((16, 16, 3))
        p = pyramid.build_subsample_pyramid(img, pyramid.PyramidConfig(factors=(1, 2)))
        caches, gys = [], []
        for _, lvl in p.levels:
            t, c = enc.encode_with_cache(lvl, params)
            caches.append(c)
            gys.append(rng.standard_normal(t.shape))
        total = enc.encoder_backward_pyramid(gys, caches, params)
        per_level = [enc.encoder_backward(gy, c, params)[0]
                     for gy, c in zip(gys, caches)]
        for i in range(len(params.kernels)):
            np.testing.assert_allclose(
                total.kernels[i], per_level[0].kernels[i] + per_level[1].kernels[i],
                rtol=1e-12)
            np.testing.assert_allclose(
                total.biases[i], per_level[0].biases[i] + per_level[1].biases[i],
                rtol=1e-12)

    def test_shape_mismatch_rejected(self):
        params = enc.init_encoder(tiny_specs(), seed=14)
        img = np.random.default_rng(11).random((12, 12, 3), dtype=np.float32)
        out, cache = enc.encode_with_cache(img, params)
        bad = np.zeros((out.shape[0] + 1, out.shape[1], out.shape[2]), dtype=np.float32)
        with pytest.raises(ContractViolationError):
            enc.encoder_backward(bad, cache, params)


class TestInit:
    def test_seeded_init_reproducible(self):
        a = enc.init_encoder(seed=42)
        b = enc.init_encoder(seed=42)
        for x, y in zip(a.kernels, b.kernels):
            np.testing.assert_array_equal(x, y)

    def test_trainable_mask_marks_last_two(self):
        params = enc.init_encoder(seed=0, trainable_last=2)
        assert params.trainable == (False, True, True)

    def test_validate_catches_shape_drift(self):
        params = enc.init_encoder(seed=0)
        params.kernels[0] = params.kernels[0][:, :, :2, :]
        with pytest.raises(ContractViolationError):
            params.validate()
