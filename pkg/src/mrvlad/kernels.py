"""Hot numeric kernels with two interchangeable backends.

The inner loops that dominate runtime (strided convolution forward/backward,
5-tap separable blur, bilinear resize) exist twice: a plain-loop version
compiled with numba's ``@njit``, and a vectorized pure-numpy version. The
active backend is chosen once at import time from the ``MRVLAD_BACKEND``
environment variable:

    MRVLAD_BACKEND=numba   force numba (ImportError if unavailable)
    MRVLAD_BACKEND=numpy   force the pure-numpy fallback
    unset / "auto"         numba when importable, else numpy

Both backends are kept importable side by side (``numpy_impl`` /
``numba_impl``) so tests and ``benchmarks/bench_kernels.py`` can compare
them directly. Kernels are compiled without fastmath and run single
threaded: results must be deterministic for a given backend.

Conventions: images and feature maps are ``(H, W, C)`` arrays; convolution
kernels are ``(k, k, C_in, C_out)``. A strided convolution with odd kernel
``k`` and stride ``s`` produces exactly ``(H // s, W // s)`` outputs; the
window for output ``(oy, ox)`` starts at ``(oy*s - k//2, ox*s - k//2)`` and
out-of-bounds taps read zero.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

from .errors import ConfigError

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward_input",
    "conv2d_backward_params",
    "blur5",
    "bilinear_resize",
    "numpy_impl",
    "numba_impl",
]


# ---------------------------------------------------------------------------
# loop kernels (numba source)
# ---------------------------------------------------------------------------


def _conv2d_forward_loops(x, w, b, stride):
    in_h, in_w, c_in = x.shape
    k = w.shape[0]
    c_out = w.shape[3]
    pad = k // 2
    out_h = in_h // stride
    out_w = in_w // stride
    y = np.zeros((out_h, out_w, c_out), dtype=x.dtype)
    for oy in range(out_h):
        iy0 = oy * stride - pad
        for ox in range(out_w):
            ix0 = ox * stride - pad
            for co in range(c_out):
                y[oy, ox, co] = b[co]
            for ky in range(k):
                iy = iy0 + ky
                if iy < 0 or iy >= in_h:
                    continue
                for kx in range(k):
                    ix = ix0 + kx
                    if ix < 0 or ix >= in_w:
                        continue
                    for ci in range(c_in):
                        v = x[iy, ix, ci]
                        for co in range(c_out):
                            y[oy, ox, co] += v * w[ky, kx, ci, co]
    return y


def _conv2d_backward_input_loops(w, gy, in_h, in_w, stride):
    k = w.shape[0]
    c_in = w.shape[2]
    c_out = w.shape[3]
    pad = k // 2
    out_h, out_w = gy.shape[0], gy.shape[1]
    gx = np.zeros((in_h, in_w, c_in), dtype=gy.dtype)
    for oy in range(out_h):
        iy0 = oy * stride - pad
        for ox in range(out_w):
            ix0 = ox * stride - pad
            for ky in range(k):
                iy = iy0 + ky
                if iy < 0 or iy >= in_h:
                    continue
                for kx in range(k):
                    ix = ix0 + kx
                    if ix < 0 or ix >= in_w:
                        continue
                    for ci in range(c_in):
                        acc = gy[oy, ox, 0] * 0.0
                        for co in range(c_out):
                            acc += w[ky, kx, ci, co] * gy[oy, ox, co]
                        gx[iy, ix, ci] += acc
    return gx


def _conv2d_backward_params_loops(x, gy, k, stride):
    in_h, in_w, c_in = x.shape
    out_h, out_w, c_out = gy.shape
    pad = k // 2
    gw = np.zeros((k, k, c_in, c_out), dtype=x.dtype)
    gb = np.zeros(c_out, dtype=x.dtype)
    for oy in range(out_h):
        iy0 = oy * stride - pad
        for ox in range(out_w):
            ix0 = ox * stride - pad
            for co in range(c_out):
                gb[co] += gy[oy, ox, co]
            for ky in range(k):
                iy = iy0 + ky
                if iy < 0 or iy >= in_h:
                    continue
                for kx in range(k):
                    ix = ix0 + kx
                    if ix < 0 or ix >= in_w:
                        continue
                    for ci in range(c_in):
                        v = x[iy, ix, ci]
                        for co in range(c_out):
                            gw[ky, kx, ci, co] += v * gy[oy, ox, co]
    return gw, gb


def _blur5_loops(img, taps):
    # symmetric reflection: index -1 maps to 0, index n maps to n-1
    in_h, in_w, c = img.shape
    tmp = np.zeros_like(img)
    out = np.zeros_like(img)
    for y in range(in_h):
        for t in range(5):
            iy = y + t - 2
            if iy < 0:
                iy = -iy - 1
            elif iy >= in_h:
                iy = 2 * in_h - iy - 1
            wt = taps[t]
            for x in range(in_w):
                for ch in range(c):
                    tmp[y, x, ch] += wt * img[iy, x, ch]
    for y in range(in_h):
        for x in range(in_w):
            for t in range(5):
                ix = x + t - 2
                if ix < 0:
                    ix = -ix - 1
                elif ix >= in_w:
                    ix = 2 * in_w - ix - 1
                wt = taps[t]
                for ch in range(c):
                    out[y, x, ch] += wt * tmp[y, ix, ch]
    return out


def _bilinear_resize_loops(img, out_h, out_w):
    in_h, in_w, c = img.shape
    out = np.empty((out_h, out_w, c), dtype=img.dtype)
    scale_y = in_h / out_h
    scale_x = in_w / out_w
    for oy in range(out_h):
        sy = (oy + 0.5) * scale_y - 0.5
        if sy < 0.0:
            sy = 0.0
        if sy > in_h - 1:
            sy = in_h - 1
        y0 = int(sy)
        y1 = y0 + 1 if y0 + 1 < in_h else in_h - 1
        fy = sy - y0
        for ox in range(out_w):
            sx = (ox + 0.5) * scale_x - 0.5
            if sx < 0.0:
                sx = 0.0
            if sx > in_w - 1:
                sx = in_w - 1
            x0 = int(sx)
            x1 = x0 + 1 if x0 + 1 < in_w else in_w - 1
            fx = sx - x0
            for ch in range(c):
                top = img[y0, x0, ch] * (1.0 - fx) + img[y0, x1, ch] * fx
                bot = img[y1, x0, ch] * (1.0 - fx) + img[y1, x1, ch] * fx
                out[oy, ox, ch] = top * (1.0 - fy) + bot * fy
    return out


# ---------------------------------------------------------------------------
# vectorized numpy fallback
# ---------------------------------------------------------------------------


def _pad_for_conv(x, k, stride, out_h, out_w):
    pad = k // 2
    in_h, in_w = x.shape[0], x.shape[1]
    pe_h = max(0, (out_h - 1) * stride + k - pad - in_h)
    pe_w = max(0, (out_w - 1) * stride + k - pad - in_w)
    return np.pad(x, ((pad, pe_h), (pad, pe_w), (0, 0)))


def _conv2d_forward_numpy(x, w, b, stride):
    in_h, in_w, _ = x.shape
    k, _, _, c_out = w.shape
    out_h, out_w = in_h // stride, in_w // stride
    xp = _pad_for_conv(x, k, stride, out_h, out_w)
    y = np.broadcast_to(b, (out_h, out_w, c_out)).astype(x.dtype, copy=True)
    for ky in range(k):
        for kx in range(k):
            sl = xp[ky : ky + (out_h - 1) * stride + 1 : stride,
                    kx : kx + (out_w - 1) * stride + 1 : stride]
            y += sl @ w[ky, kx]
    return y


def _conv2d_backward_input_numpy(w, gy, in_h, in_w, stride):
    k = w.shape[0]
    pad = k // 2
    out_h, out_w = gy.shape[0], gy.shape[1]
    pe_h = max(0, (out_h - 1) * stride + k - pad - in_h)
    pe_w = max(0, (out_w - 1) * stride + k - pad - in_w)
    gxp = np.zeros((in_h + pad + pe_h, in_w + pad + pe_w, w.shape[2]), dtype=gy.dtype)
    for ky in range(k):
        for kx in range(k):
            gxp[ky : ky + (out_h - 1) * stride + 1 : stride,
                kx : kx + (out_w - 1) * stride + 1 : stride] += gy @ w[ky, kx].T
    return gxp[pad : pad + in_h, pad : pad + in_w]


def _conv2d_backward_params_numpy(x, gy, k, stride):
    out_h, out_w, _ = gy.shape
    xp = _pad_for_conv(x, k, stride, out_h, out_w)
    gw = np.empty((k, k, x.shape[2], gy.shape[2]), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            sl = xp[ky : ky + (out_h - 1) * stride + 1 : stride,
                    kx : kx + (out_w - 1) * stride + 1 : stride]
            gw[ky, kx] = np.einsum("xyi,xyo->io", sl, gy)
    gb = gy.sum(axis=(0, 1))
    return gw, gb


def _blur5_numpy(img, taps):
    padded = np.pad(img, ((2, 2), (0, 0), (0, 0)), mode="symmetric")
    tmp = np.zeros_like(img)
    for t in range(5):
        tmp += taps[t] * padded[t : t + img.shape[0]]
    padded = np.pad(tmp, ((0, 0), (2, 2), (0, 0)), mode="symmetric")
    out = np.zeros_like(img)
    for t in range(5):
        out += taps[t] * padded[:, t : t + img.shape[1]]
    return out


def _bilinear_resize_numpy(img, out_h, out_w):
    in_h, in_w, _ = img.shape
    sy = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0, in_h - 1)
    sx = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0, in_w - 1)
    y0 = sy.astype(np.int64)
    x0 = sx.astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (sy - y0).astype(img.dtype)[:, None, None]
    fx = (sx - x0).astype(img.dtype)[None, :, None]
    top = img[y0[:, None], x0[None, :]] * (1 - fx) + img[y0[:, None], x1[None, :]] * fx
    bot = img[y1[:, None], x0[None, :]] * (1 - fx) + img[y1[:, None], x1[None, :]] * fx
    return top * (1 - fy) + bot * fy


numpy_impl = SimpleNamespace(
    name="numpy",
    conv2d_forward=_conv2d_forward_numpy,
    conv2d_backward_input=_conv2d_backward_input_numpy,
    conv2d_backward_params=_conv2d_backward_params_numpy,
    blur5=_blur5_numpy,
    bilinear_resize=_bilinear_resize_numpy,
)


def _build_numba_impl():
    from numba import njit

    jit = njit(cache=True)
    return SimpleNamespace(
        name="numba",
        conv2d_forward=jit(_conv2d_forward_loops),
        conv2d_backward_input=jit(_conv2d_backward_input_loops),
        conv2d_backward_params=jit(_conv2d_backward_params_loops),
        blur5=jit(_blur5_loops),
        bilinear_resize=jit(_bilinear_resize_loops),
    )


def _select_backend():
    requested = os.environ.get("MRVLAD_BACKEND", "auto").strip().lower() or "auto"
    if requested == "numpy":
        return numpy_impl, None
    if requested == "numba":
        return _build_numba_impl(), None
    if requested == "auto":
        try:
            return _build_numba_impl(), None
        except ImportError:
            return numpy_impl, None
    raise ConfigError(
        f"MRVLAD_BACKEND must be 'numba', 'numpy' or 'auto', got {requested!r}"
    )


_impl, _ = _select_backend()

try:
    numba_impl = _impl if _impl.name == "numba" else _build_numba_impl()
except ImportError:
    numba_impl = None

BACKEND = _impl.name

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_params = _impl.conv2d_backward_params
blur5 = _impl.blur5
bilinear_resize = _impl.bilinear_resize
