"""Backend equivalence and oracle checks for the hot numeric kernels."""

import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import ndimage

from mrvlad import kernels


def conv_oracle(x, w, b, stride):
    """Nested-loop convolution with the floor output rule and zero padding."""
    in_h, in_w, c_in = x.shape
    k = w.shape[0]
    c_out = w.shape[3]
    pad = k // 2
    out = np.zeros((in_h // stride, in_w // stride, c_out))
    for oy in range(out.shape[0]):
        for ox in range(out.shape[1]):
            acc = b.astype(np.float64).copy()
            for ky in range(k):
                for kx in range(k):
                    iy, ix = oy * stride - pad + ky, ox * stride - pad + kx
                    if 0 <= iy < in_h and 0 <= ix < in_w:
                        acc += x[iy, ix] @ w[ky, kx]
            out[oy, ox] = acc
    return out


@pytest.fixture(scope="module")
def impls():
    out = [kernels.numpy_impl]
    if kernels.numba_impl is not None:
        out.append(kernels.numba_impl)
    return out


@pytest.mark.parametrize("shape,stride", [((12, 10, 3), 1), ((13, 11, 3), 2),
                                          ((9, 17, 2), 3)])
def test_conv_forward_matches_oracle(impls, shape, stride):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(shape)
    w = rng.standard_normal((3, 3, shape[2], 4))
    b = rng.standard_normal(4)
    want = conv_oracle(x, w, b, stride)
    for impl in impls:
        got = impl.conv2d_forward(x, w, b, stride)
        np.testing.assert_allclose(got, want, atol=1e-10)


def test_backends_agree_on_all_kernels(impls):
    if len(impls) < 2:
        pytest.skip("numba unavailable")
    rng = np.random.default_rng(1)
    x = rng.standard_normal((21, 19, 3)).astype(np.float32)
    w = rng.standard_normal((3, 3, 3, 6)).astype(np.float32)
    b = rng.standard_normal(6).astype(np.float32)
    gy = rng.standard_normal((10, 9, 6)).astype(np.float32)
    taps = np.array([0.05, 0.25, 0.4, 0.25, 0.05], dtype=np.float32)
    a, c = impls
    np.testing.assert_allclose(a.conv2d_forward(x, w, b, 2),
                               c.conv2d_forward(x, w, b, 2), atol=2e-5)
    np.testing.assert_allclose(a.conv2d_backward_input(w, gy, 21, 19, 2),
                               c.conv2d_backward_input(w, gy, 21, 19, 2), atol=2e-5)
    gw_a, gb_a = a.conv2d_backward_params(x, gy, 3, 2)
    gw_c, gb_c = c.conv2d_backward_params(x, gy, 3, 2)
    np.testing.assert_allclose(gw_a, gw_c, atol=2e-4)
    np.testing.assert_allclose(gb_a, gb_c, atol=2e-4)
    np.testing.assert_allclose(a.blur5(x, taps), c.blur5(x, taps), atol=2e-5)
    np.testing.assert_allclose(a.bilinear_resize(x, 14, 8),
                               c.bilinear_resize(x, 14, 8), atol=2e-5)


def test_blur_matches_scipy_reflect(impls):
    rng = np.random.default_rng(2)
    img = rng.random((17, 13, 3))
    taps = np.array([0.06, 0.24, 0.4, 0.24, 0.06])
    want = np.stack(
        [ndimage.correlate(img[:, :, c], np.outer(taps, taps), mode="reflect")
         for c in range(3)], axis=-1)
    for impl in impls:
        np.testing.assert_allclose(impl.blur5(img, taps), want, atol=1e-12)


def test_bilinear_matches_map_coordinates(impls):
    rng = np.random.default_rng(3)
    img = rng.random((15, 11, 3))
    out_h, out_w = 9, 23
    sy = np.clip((np.arange(out_h) + 0.5) * 15 / out_h - 0.5, 0, 14)
    sx = np.clip((np.arange(out_w) + 0.5) * 11 / out_w - 0.5, 0, 10)
    gy, gx = np.meshgrid(sy, sx, indexing="ij")
    want = np.stack(
        [ndimage.map_coordinates(img[:, :, c], [gy, gx], order=1, mode="nearest")
         for c in range(3)], axis=-1)
    for impl in impls:
        np.testing.assert_allclose(impl.bilinear_resize(img, out_h, out_w),
                                   want, atol=1e-12)


def test_bilinear_identity_at_same_size(impls):
    rng = np.random.default_rng(4)
    img = rng.random((8, 6, 3))
    for impl in impls:
        np.testing.assert_allclose(impl.bilinear_resize(img, 8, 6), img, atol=1e-14)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, MRVLAD_BACKEND="numpy")
    out = subprocess.run(
        [sys.executable, "-c", "from mrvlad import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_env_flag_rejects_garbage():
    env = dict(os.environ, MRVLAD_BACKEND="cuda")
    out = subprocess.run(
        [sys.executable, "-c", "import mrvlad.kernels"],
        env=env, capture_output=True, text=True)
    assert out.returncode != 0
    assert "MRVLAD_BACKEND" in out.stderr
