"""Trainable convolutional image encoder with manual backprop.

Maps an (H, W, 3) image to an (H//stride, W//stride, D) feature tensor.
The default stack is three 3x3 stride-2 convolutions (3 -> 8 -> 16 -> 16)
with ReLU between layers and no nonlinearity after the last one, so the
aggregation downstream sees raw convolutional features. The same parameters
are applied to every pyramid level (weight sharing across resolutions), and
backward passes from all levels accumulate into the shared parameters.

Heavy lifting lives in :mod:`mrvlad.kernels`; this module owns shapes,
parameter containers and the layer-by-layer chain rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractViolationError, InputTooSmallError


@dataclass(frozen=True)
class ConvLayerSpec:
    kernel: int
    stride: int
    in_channels: int
    out_channels: int
    relu: bool


DEFAULT_LAYER_SPECS = (
    ConvLayerSpec(3, 2, 3, 8, True),
    ConvLayerSpec(3, 2, 8, 16, True),
    ConvLayerSpec(3, 2, 16, 16, False),
)


@dataclass
class EncoderParams:
    """Per-layer kernels/biases plus the trainable-layer mask."""

    specs: tuple
    kernels: list  # (k, k, c_in, c_out) per layer
    biases: list  # (c_out,) per layer
    trainable: tuple  # bool per layer

    @property
    def depth(self) -> int:
        return self.specs[-1].out_channels

    @property
    def total_stride(self) -> int:
        s = 1
        for spec in self.specs:
            s *= spec.stride
        return s

    @property
    def dtype(self):
        return self.kernels[0].dtype

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            specs=self.specs,
            kernels=[k.copy() for k in self.kernels],
            biases=[b.copy() for b in self.biases],
            trainable=self.trainable,
        )

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(
            specs=self.specs,
            kernels=[k.astype(dtype) for k in self.kernels],
            biases=[b.astype(dtype) for b in self.biases],
            trainable=self.trainable,
        )

    def validate(self):
        for i, (spec, k, b) in enumerate(zip(self.specs, self.kernels, self.biases)):
            want = (spec.kernel, spec.kernel, spec.in_channels, spec.out_channels)
            if k.shape != want:
                raise ContractViolationError(f"layer {i} kernel shape {k.shape} != {want}")
            if b.shape != (spec.out_channels,):
                raise ContractViolationError(f"layer {i} bias shape {b.shape}")
            if not (np.all(np.isfinite(k)) and np.all(np.isfinite(b))):
                raise ContractViolationError(f"layer {i} has non-finite parameters")
        for a, b in zip(self.specs, self.specs[1:]):
            if a.out_channels != b.in_channels:
                raise ContractViolationError("layer channel counts do not chain")


@dataclass
class EncoderGrads:
    """Gradients aligned with EncoderParams.kernels / .biases."""

    kernels: list
    biases: list

    def add_(self, other: "EncoderGrads"):
        for a, b in zip(self.kernels, other.kernels):
            a += b
        for a, b in zip(self.biases, other.biases):
            a += b
        return self


def zero_grads(params: EncoderParams) -> EncoderGrads:
    return EncoderGrads(
        kernels=[np.zeros_like(k) for k in params.kernels],
        biases=[np.zeros_like(b) for b in params.biases],
    )


def init_encoder(specs=DEFAULT_LAYER_SPECS, seed=0, trainable_last=2,
                 dtype=np.float32) -> EncoderParams:
    """He-style scaled uniform initialization by fan-in, seeded."""
    rng = np.random.default_rng(seed)
    ks, bs = [], []
    for spec in specs:
        fan_in = spec.kernel * spec.kernel * spec.in_channels
        bound = np.sqrt(6.0 / fan_in)
        ks.append(rng.uniform(-bound, bound,
                              (spec.kernel, spec.kernel, spec.in_channels,
                               spec.out_channels)).astype(dtype))
        bs.append(np.zeros(spec.out_channels, dtype=dtype))
    n = len(specs)
    trainable = tuple(i >= n - trainable_last for i in range(n))
    return EncoderParams(specs=tuple(specs), kernels=ks, biases=bs, trainable=trainable)


def _check_input(img: np.ndarray, params: EncoderParams):
    if img.ndim != 3 or img.shape[2] != params.specs[0].in_channels:
        raise ContractViolationError(
            f"expected (H, W, {params.specs[0].in_channels}) input, got {img.shape}"
        )
    h, w = img.shape[0], img.shape[1]
    for spec in params.specs:
        h, w = h // spec.stride, w // spec.stride
        if h < 1 or w < 1:
            raise InputTooSmallError(
                f"input {img.shape[1]}x{img.shape[0]} too small for the layer stack "
                f"(total stride {params.total_stride})"
            )


def output_shape(image_hw: tuple, params: EncoderParams) -> tuple:
    h, w = image_hw
    for spec in params.specs:
        h, w = h // spec.stride, w // spec.stride
    return h, w, params.depth


def encode_with_cache(img: np.ndarray, params: EncoderParams):
    """Forward pass returning (feature tensor, activation cache for backward)."""
    _check_input(img, params)
    x = np.ascontiguousarray(img, dtype=params.dtype)
    cache = []
    for spec, w, b in zip(params.specs, params.kernels, params.biases):
        pre = kernels.conv2d_forward(x, w, b, spec.stride)
        cache.append((x, pre))
        x = np.maximum(pre, 0) if spec.relu else pre
    return x, cache


def encode(img: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Deterministic forward pass; output spatial size = input size // stride."""
    out, _ = encode_with_cache(img, params)
    return out


def encode_pyramid(pyr, params: EncoderParams):
    """One feature tensor per pyramid level, same parameters at every level."""
    fp = []
    for i, (factor, img) in enumerate(pyr.levels):
        try:
            fp.append((factor, encode(img, params)))
        except (InputTooSmallError, ContractViolationError) as e:
            raise type(e)(f"pyramid level {i} (factor {factor}): {e}") from e
    return fp


def encoder_backward(grad_out: np.ndarray, cache, params: EncoderParams):
    """Backprop one image's feature gradient; returns (EncoderGrads, input grad).

    Gradients are produced for every layer; the training loop applies the
    trainable mask when updating.
    """
    if len(cache) != len(params.specs):
        raise ContractViolationError(
            f"cache has {len(cache)} layers, encoder has {len(params.specs)}"
        )
    grads = zero_grads(params)
    gy = grad_out
    for i in reversed(range(len(params.specs))):
        spec = params.specs[i]
        x, pre = cache[i]
        if gy.shape != pre.shape:
            raise ContractViolationError(
                f"layer {i}: upstream grad shape {gy.shape} != activation {pre.shape}"
            )
        if spec.relu:
            gy = np.where(pre > 0, gy, 0)
        gy = np.ascontiguousarray(gy)
        gw, gb = kernels.conv2d_backward_params(x, gy, spec.kernel, spec.stride)
        grads.kernels[i] += gw
        grads.biases[i] += gb
        gy = kernels.conv2d_backward_input(params.kernels[i], gy,
                                           x.shape[0], x.shape[1], spec.stride)
    return grads, gy


def encoder_backward_pyramid(grad_outs, caches, params: EncoderParams) -> EncoderGrads:
    """Accumulate parameter gradients from every pyramid level."""
    if len(grad_outs) != len(caches):
        raise ContractViolationError("per-level grads and caches differ in length")
    total = zero_grads(params)
    for gy, cache in zip(grad_outs, caches):
        g, _ = encoder_backward(gy, cache, params)
        total.add_(g)
    return total
