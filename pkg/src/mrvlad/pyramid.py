"""Low-resolution image pyramids.

Two construction modes. ``subsample`` keeps every l-th pixel of the base
image (no filtering, no interpolation), so a level for integer factor l has
dimensions ``(H // l, W // l)`` and its pixel ``(x, y)`` is exactly source
pixel ``(x*l, y*l)``. ``gaussian`` repeatedly blurs with a 5x5 Gaussian
filter (reflected borders) and shrinks by ``1/F`` with bilinear
interpolation, tracking the cumulative effective blur

    sigma_eff[i] = F * sqrt(sigma_eff[i-1]**2 + sigma**2),  sigma_eff[0] = 0

which is undefined for the base level.

Images are ``(H, W, 3)`` float arrays in [0, 1]; all functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, InputTooSmallError

SUBSAMPLE = "subsample"
GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class PyramidConfig:
    """Ordered reduction factors plus mode-specific parameters.

    Factors must be strictly increasing and start at 1 (the untouched base
    image). In subsample mode they must be positive integers; in gaussian
    mode they must form the ladder F**0, F**1, ... for ``gaussian_factor``.
    """

    factors: tuple = (1,)
    mode: str = SUBSAMPLE
    gaussian_factor: float = math.sqrt(2.0)
    gaussian_sigma: float = 1.0
    min_feature_extent: int = 4

    def __post_init__(self):
        if self.mode not in (SUBSAMPLE, GAUSSIAN):
            raise ConfigError(f"unknown pyramid mode {self.mode!r}")
        if len(self.factors) == 0:
            raise ConfigError("factor set is empty")
        fs = tuple(float(f) for f in self.factors)
        if abs(fs[0] - 1.0) > 1e-12:
            raise ConfigError(f"first factor must be 1, got {fs[0]}")
        if any(b <= a for a, b in zip(fs, fs[1:])):
            raise ConfigError(f"factors must be strictly increasing: {fs}")
        if self.mode == SUBSAMPLE:
            for f in fs:
                if f != int(f) or f < 1:
                    raise ConfigError(f"subsample factors must be positive integers, got {f}")
        else:
            if not math.isfinite(self.gaussian_sigma) or self.gaussian_sigma < 0:
                raise ConfigError(f"gaussian_sigma must be finite and >= 0, got {self.gaussian_sigma}")
            if not math.isfinite(self.gaussian_factor) or self.gaussian_factor <= 1.0:
                raise ConfigError(f"gaussian_factor must be finite and > 1, got {self.gaussian_factor}")
            for i, f in enumerate(fs):
                expect = self.gaussian_factor**i
                if abs(f - expect) > 1e-9 * max(1.0, expect):
                    raise ConfigError(
                        f"gaussian factors must be powers of F={self.gaussian_factor}: "
                        f"factor {f} at position {i}, expected {expect}"
                    )
        if self.min_feature_extent < 1:
            raise ConfigError("min_feature_extent must be >= 1")

    @classmethod
    def gaussian_ladder(cls, factor: float = math.sqrt(2.0), sigma: float = 1.0,
                        max_reduction: float = 8.0, min_feature_extent: int = 4):
        """Config whose factors are F**0, F**1, ... up to ``max_reduction``."""
        if not math.isfinite(factor) or factor <= 1.0:
            raise ConfigError(f"gaussian factor must be finite and > 1, got {factor}")
        fs = []
        i = 0
        while factor**i <= max_reduction * (1 + 1e-9):
            fs.append(factor**i)
            i += 1
        return cls(factors=tuple(fs), mode=GAUSSIAN, gaussian_factor=factor,
                   gaussian_sigma=sigma, min_feature_extent=min_feature_extent)


@dataclass
class ImagePyramid:
    """Ordered (factor, image) levels; level 0 is the untouched base image."""

    levels: list
    sigma_eff: list = field(default_factory=list)  # gaussian mode; None at base

    def __len__(self):
        return len(self.levels)

    def images(self):
        return [img for _, img in self.levels]


def effective_sigma(factor: float, sigma: float, level: int) -> float:
    """Cumulative blur std-dev accrued at ``level`` (base level = 0 is undefined)."""
    if level < 1:
        raise ConfigError("effective sigma is undefined for the base level (level 0)")
    s = 0.0
    for _ in range(level):
        s = factor * math.sqrt(s * s + sigma * sigma)
    return s


def effective_sigma_ladder(factor: float, sigma: float, levels: int) -> list:
    """sigma_eff for levels 1..levels as a list."""
    out = []
    s = 0.0
    for _ in range(levels):
        s = factor * math.sqrt(s * s + sigma * sigma)
        out.append(s)
    return out


def gaussian_taps(sigma: float, dtype=np.float64) -> np.ndarray:
    """Normalized 5-tap Gaussian; the separable outer product is the 5x5 filter."""
    if sigma == 0.0:
        taps = np.zeros(5, dtype=np.float64)
        taps[2] = 1.0
    else:
        xs = np.arange(-2.0, 3.0)
        taps = np.exp(-0.5 * (xs / sigma) ** 2)
        taps /= taps.sum()
    return taps.astype(dtype)


def _check_image(img: np.ndarray):
    if img.ndim != 3:
        raise ConfigError(f"expected (H, W, C) image, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise InputTooSmallError(f"empty image {img.shape}")


def subsample_level(img: np.ndarray, factor: int) -> np.ndarray:
    """Single every-l-th-pixel level; (H // l, W // l), pure indexing."""
    l = int(factor)
    if l < 1:
        raise ConfigError(f"subsample factor must be >= 1, got {factor}")
    h, w = img.shape[0] // l, img.shape[1] // l
    if h < 1 or w < 1:
        raise ConfigError(f"factor {l} reduces {img.shape[1]}x{img.shape[0]} below one pixel")
    return img[0 : h * l : l, 0 : w * l : l]


def build_subsample_pyramid(img: np.ndarray, cfg: PyramidConfig) -> ImagePyramid:
    """Every-l-th-pixel pyramid; level l has dimensions (H//l, W//l)."""
    if cfg.mode != SUBSAMPLE:
        raise ConfigError(f"config mode is {cfg.mode!r}, expected {SUBSAMPLE!r}")
    _check_image(img)
    levels = [(float(int(f)), subsample_level(img, int(f))) for f in cfg.factors]
    return ImagePyramid(levels=levels, sigma_eff=[None] * len(levels))


def build_gaussian_pyramid(img: np.ndarray, cfg: PyramidConfig) -> ImagePyramid:
    """Blur-then-shrink pyramid with effective-sigma tracking."""
    if cfg.mode != GAUSSIAN:
        raise ConfigError(f"config mode is {cfg.mode!r}, expected {GAUSSIAN!r}")
    _check_image(img)
    taps = gaussian_taps(cfg.gaussian_sigma, dtype=img.dtype)
    levels = [(1.0, img)]
    sigma_eff = [None]
    current = img
    s_eff = 0.0
    for f in cfg.factors[1:]:
        if min(current.shape[0], current.shape[1]) < 2:
            raise ConfigError(
                f"level for factor {f} would blur a {current.shape[1]}x{current.shape[0]} image"
            )
        blurred = kernels.blur5(np.ascontiguousarray(current), taps)
        out_h = max(1, round(current.shape[0] / cfg.gaussian_factor))
        out_w = max(1, round(current.shape[1] / cfg.gaussian_factor))
        current = kernels.bilinear_resize(blurred, out_h, out_w)
        s_eff = cfg.gaussian_factor * math.sqrt(s_eff**2 + cfg.gaussian_sigma**2)
        levels.append((float(f), current))
        sigma_eff.append(s_eff)
    return ImagePyramid(levels=levels, sigma_eff=sigma_eff)


def build_pyramid(img: np.ndarray, cfg: PyramidConfig) -> ImagePyramid:
    if cfg.mode == SUBSAMPLE:
        return build_subsample_pyramid(img, cfg)
    return build_gaussian_pyramid(img, cfg)


def validate_for_encoder(cfg: PyramidConfig, image_hw: tuple, total_stride: int):
    """Reject factors whose encoder output would fall below min_feature_extent."""
    h, w = image_hw
    bad = []
    for f in cfg.factors:
        lh, lw = int(h / f), int(w / f)
        if min(lh // total_stride, lw // total_stride) < cfg.min_feature_extent:
            bad.append(f)
    if bad:
        raise ConfigError(
            f"factors {bad} give encoder outputs below min_feature_extent="
            f"{cfg.min_feature_extent} for a {w}x{h} image at stride {total_stride}"
        )
