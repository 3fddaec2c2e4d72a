"""Synthetic place-world generator for desk-scale experiments.

A flat world of colored landmarks (boxes, discs, triangles) is sampled once
from a seed; cameras on a grid render flat-shaded perspective views of
whatever lies within ``VIEW_RADIUS`` meters and the field of view. Because
``2 * VIEW_RADIUS`` is below the 25 m negative-mining radius, two cameras
more than 25 m apart can never see the same landmark, while a query
re-rendered at a jittered database location shares almost its whole view.

Splits are geographic strips along x (train / val / test), database
records sit on the grid, and query records re-render every k-th grid
location with viewpoint jitter and a different appearance mode. Everything
is derived from the config seed; regeneration is byte-identical.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, asdict

import numpy as np

from .dataset import Dataset, PlaceRecord, save_manifest, save_image
from .errors import ConfigError

VIEW_RADIUS = 12.0  # m; keep below half the 25 m negative radius
FOV_DEG = 90.0
CAMERA_HEIGHT = 1.6  # m
NEAR_PLANE = 0.75  # m

APPEARANCES = ("day", "night")

_SPLIT_FRACTIONS = (0.6, 0.2, 0.2)  # train / val / test strips along x


@dataclass(frozen=True)
class SyntheticWorldConfig:
    extent: float = 200.0  # square world side, meters
    landmark_count: int = 2500
    camera_spacing: float = 8.0
    jitter_lateral: float = 1.5  # m
    jitter_heading_deg: float = 10.0
    appearance_db: str = "day"
    appearance_query: str = "night"
    night_strength: float = 0.35  # 0 = day, 1 = full night
    palette_size: int = 0  # 0 = continuous colors; else sample from K fixed hues
    noise_level: float = 0.03
    image_size: int = 64
    seed: int = 0
    query_stride_train: int = 4  # every k-th grid location gets a training query
    query_stride_eval: int = 2

    def __post_init__(self):
        if self.camera_spacing <= 0:
            raise ConfigError("camera_spacing must be positive")
        if self.extent < 100.0:
            raise ConfigError("extent must be at least 100 m (several negative radii)")
        if self.extent / self.camera_spacing < 6:
            raise ConfigError("extent too small for the requested camera spacing")
        if self.landmark_count < 1:
            raise ConfigError("landmark_count must be positive")
        if self.appearance_db not in APPEARANCES or self.appearance_query not in APPEARANCES:
            raise ConfigError(f"appearance modes must be one of {APPEARANCES}")
        if self.jitter_lateral >= 5.0:
            raise ConfigError("jitter_lateral must stay well inside the 10 m positive radius")
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")
        if self.query_stride_train < 1 or self.query_stride_eval < 1:
            raise ConfigError("query strides must be >= 1")
        if not 0.0 <= self.night_strength <= 1.0:
            raise ConfigError("night_strength must be in [0, 1]")


@dataclass
class World:
    """Landmark table: columns x, y, size, height, shape; colors (N, 3)."""

    config: SyntheticWorldConfig
    xy: np.ndarray  # (N, 2)
    size: np.ndarray  # (N,) radius-ish extent, m
    height: np.ndarray  # (N,) m
    shape: np.ndarray  # (N,) 0 box, 1 disc, 2 triangle
    color: np.ndarray  # (N, 3) in [0, 1]


def build_world(cfg: SyntheticWorldConfig) -> World:
    rng = np.random.default_rng([cfg.seed, 0x77])
    n = cfg.landmark_count
    xy = rng.uniform(0.0, cfg.extent, size=(n, 2))
    size = rng.uniform(0.5, 1.4, size=n)
    height = rng.uniform(1.2, 3.5, size=n)
    shape = rng.integers(0, 3, size=n)
    if cfg.palette_size > 0:
        # fixed saturated hues: many landmarks share a color, so telling
        # places apart needs layout, not just color statistics
        hues = np.linspace(0.0, 1.0, cfg.palette_size, endpoint=False)
        palette = np.stack([_hue_to_rgb(h) for h in hues])
        color = palette[rng.integers(0, cfg.palette_size, size=n)]
    else:
        color = rng.uniform(0.15, 1.0, size=(n, 3))
        color /= color.max(axis=1, keepdims=True)
    return World(config=cfg, xy=xy, size=size, height=height, shape=shape,
                 color=color.astype(np.float64))


def _hue_to_rgb(h: float) -> np.ndarray:
    k = np.array([(5 + h * 6) % 6, (3 + h * 6) % 6, (1 + h * 6) % 6])
    return 1.0 - np.clip(np.minimum(k, 4 - k), 0.0, 1.0) * 0.85


def visible_landmarks(world: World, x: float, y: float) -> np.ndarray:
    """Indices of landmarks within VIEW_RADIUS of (x, y), any heading."""
    d2 = np.sum((world.xy - np.array([x, y])) ** 2, axis=1)
    return np.nonzero(d2 <= VIEW_RADIUS**2)[0]


_DAY = (np.array([0.62, 0.76, 0.95]), np.array([0.42, 0.46, 0.38]),
        np.array([1.0, 1.0, 1.0]), 1.0)
_FULL_NIGHT = (np.array([0.06, 0.08, 0.20]), np.array([0.10, 0.11, 0.16]),
               np.array([0.45, 0.50, 0.90]), 0.55)


def _appearance_params(mode: str, night_strength: float = 1.0):
    """Sky/ground colors, landmark tint and gain; night interpolates from day."""
    if mode == "day":
        return _DAY
    s = night_strength
    return tuple(
        d + s * (n - d) if isinstance(d, np.ndarray) else d + s * (n - d)
        for d, n in zip(_DAY, _FULL_NIGHT)
    )


def render_view(world: World, x: float, y: float, heading: float,
                appearance: str, noise_rng=None) -> np.ndarray:
    """Flat-shaded perspective view at camera pose (x, y, heading)."""
    cfg = world.config
    h = w = cfg.image_size
    sky, ground, tint, gain = _appearance_params(appearance, cfg.night_strength)

    img = np.empty((h, w, 3), dtype=np.float64)
    horizon = int(0.45 * h)
    grad = np.linspace(1.0, 0.75, horizon)[:, None, None]
    img[:horizon] = sky * grad
    depth = np.linspace(0.55, 1.0, h - horizon)[:, None, None]
    img[horizon:] = ground * depth

    focal = (w / 2.0) / math.tan(math.radians(FOV_DEG) / 2.0)
    cos_t, sin_t = math.cos(heading), math.sin(heading)
    dx = world.xy[:, 0] - x
    dy = world.xy[:, 1] - y
    fwd = cos_t * dx + sin_t * dy
    lat = -sin_t * dx + cos_t * dy
    dist = np.hypot(dx, dy)
    vis = (fwd > NEAR_PLANE) & (dist <= VIEW_RADIUS) & (np.abs(lat) < fwd * 1.2)
    order = np.argsort(-dist)  # painter's algorithm, far first
    ys, xs = np.mgrid[0:h, 0:w]
    for i in order:
        if not vis[i]:
            continue
        f = fwd[i]
        sx = w / 2.0 + focal * lat[i] / f
        base_y = horizon + focal * CAMERA_HEIGHT / f
        half_w = focal * world.size[i] / f
        height_px = focal * world.height[i] / f
        x0, x1 = int(sx - half_w), int(math.ceil(sx + half_w))
        y1, y0 = int(base_y), int(base_y - height_px)
        x0c, x1c = max(0, x0), min(w, x1 + 1)
        y0c, y1c = max(0, y0), min(h, y1 + 1)
        if x0c >= x1c or y0c >= y1c:
            continue
        px = xs[y0c:y1c, x0c:x1c]
        py = ys[y0c:y1c, x0c:x1c]
        shape = world.shape[i]
        if shape == 0:  # box
            mask = (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)
        elif shape == 1:  # disc
            cx, cy = sx, (y0 + y1) / 2.0
            rx = max(half_w, 0.5)
            ry = max(height_px / 2.0, 0.5)
            mask = ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0
        else:  # triangle, apex up
            frac = np.clip((y1 - py) / max(y1 - y0, 1), 0.0, 1.0)
            hw = (1.0 - frac) * max(half_w, 0.5)
            mask = np.abs(px - sx) <= hw
        shade = 0.75 + 0.25 * min(1.0, 2.0 / f)
        col = np.clip(world.color[i] * tint * gain * shade, 0.0, 1.0)
        region = img[y0c:y1c, x0c:x1c]
        region[mask] = col
    if noise_rng is not None and cfg.noise_level > 0:
        img = img + noise_rng.normal(0.0, cfg.noise_level, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _record_rng(seed: int, record_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(record_id.encode())])


def _grid(cfg: SyntheticWorldConfig):
    n = int(cfg.extent // cfg.camera_spacing)
    coords = (np.arange(n) + 0.5) * cfg.camera_spacing
    return [(float(cx), float(cy)) for cy in coords for cx in coords]


def _strip_split(x: float, extent: float) -> str:
    if x < extent * _SPLIT_FRACTIONS[0]:
        return "train"
    if x < extent * (_SPLIT_FRACTIONS[0] + _SPLIT_FRACTIONS[1]):
        return "val"
    return "test"


def generate_synthetic(cfg: SyntheticWorldConfig, out_dir):
    """Render the dataset to ``out_dir`` (images/, manifest.jsonl, world.json)."""
    world = build_world(cfg)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)

    heading_rng = np.random.default_rng([cfg.seed, 0x31])
    locations = _grid(cfg)
    headings = heading_rng.uniform(0.0, 2.0 * math.pi, size=len(locations))

    records = []
    per_split_counter = {}
    for (x, y), heading in zip(locations, headings):
        strip = _strip_split(x, cfg.extent)
        idx = per_split_counter.get(strip, 0)
        per_split_counter[strip] = idx + 1

        db_id = f"{strip}-db-{idx:05d}"
        db_path = os.path.join(img_dir, db_id + ".png")
        noise_rng = _record_rng(cfg.seed, db_id)
        save_image(db_path, render_view(world, x, y, heading, cfg.appearance_db,
                                        noise_rng=noise_rng))
        records.append(PlaceRecord(id=db_id, path=db_path, x=x, y=y,
                                   split=strip + "_db"))

        stride = cfg.query_stride_train if strip == "train" else cfg.query_stride_eval
        if idx % stride != 0:
            continue
        q_id = f"{strip}-q-{idx:05d}"
        q_rng = _record_rng(cfg.seed, q_id)
        ang = q_rng.uniform(0.0, 2.0 * math.pi)
        off = q_rng.uniform(0.0, cfg.jitter_lateral)
        qx, qy = x + off * math.cos(ang), y + off * math.sin(ang)
        q_heading = heading + math.radians(q_rng.uniform(-cfg.jitter_heading_deg,
                                                         cfg.jitter_heading_deg))
        q_path = os.path.join(img_dir, q_id + ".png")
        save_image(q_path, render_view(world, qx, qy, q_heading, cfg.appearance_query,
                                       noise_rng=q_rng))
        records.append(PlaceRecord(id=q_id, path=q_path, x=qx, y=qy,
                                   split=strip + "_q"))

    save_manifest(records, os.path.join(out_dir, "manifest.jsonl"))
    with open(os.path.join(out_dir, "world.json"), "w", encoding="utf-8") as f:
        json.dump({
            "config": asdict(cfg),
            "view_radius_m": VIEW_RADIUS,
            "landmarks": {
                "xy": world.xy.tolist(),
                "size": world.size.tolist(),
                "height": world.height.tolist(),
                "shape": world.shape.tolist(),
                "color": world.color.tolist(),
            },
            "cameras": [
                {"id": r.id, "x": r.x, "y": r.y, "split": r.split} for r in records
            ],
        }, f)
    return Dataset(records), world
