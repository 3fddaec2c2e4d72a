"""Geo-tagged image datasets: JSON-lines manifest I/O and image loading.

A manifest holds one record per line with keys ``id, path, x_m, y_m,
split``; positions are planar Euclidean meters, so metric radii (10 m
positives, 25 m negatives, localization radius) apply directly. Image
paths are stored relative to the manifest file.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PilImage

from .errors import BrokenRecordError, DuplicateIdError, ManifestError

SPLITS = ("train_db", "train_q", "val_db", "val_q", "test_db", "test_q")

_REQUIRED_KEYS = ("id", "path", "x_m", "y_m", "split")


@dataclass(frozen=True)
class PlaceRecord:
    id: str
    path: str  # absolute path after loading
    x: float
    y: float
    split: str

    @property
    def position(self):
        return (self.x, self.y)


class Dataset:
    """Validated list of records with id and split lookups."""

    def __init__(self, records):
        self.records = list(records)
        self.by_id = {}
        for r in self.records:
            if r.id in self.by_id:
                raise DuplicateIdError(f"duplicate record id {r.id!r}")
            self.by_id[r.id] = r

    def __len__(self):
        return len(self.records)

    def split(self, name: str):
        return [r for r in self.records if r.split == name]

    def split_counts(self) -> dict:
        counts = {s: 0 for s in SPLITS}
        for r in self.records:
            counts[r.split] = counts.get(r.split, 0) + 1
        return counts

    def positions(self, ids) -> np.ndarray:
        return np.array([[self.by_id[i].x, self.by_id[i].y] for i in ids], dtype=np.float64)


def load_manifest(path, check_images: bool = True) -> Dataset:
    """Parse and validate a manifest; errors carry line numbers / offending ids."""
    base = os.path.dirname(os.path.abspath(path))
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: record is not an object")
            missing = [k for k in _REQUIRED_KEYS if k not in obj]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing keys {missing}")
            rid = str(obj["id"])
            if rid in seen:
                raise DuplicateIdError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            try:
                x, y = float(obj["x_m"]), float(obj["y_m"])
            except (TypeError, ValueError) as e:
                raise ManifestError(f"{path}:{lineno}: non-numeric position") from e
            if not (np.isfinite(x) and np.isfinite(y)):
                raise ManifestError(f"{path}:{lineno}: non-finite position")
            split = str(obj["split"])
            if split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {split!r}")
            records.append(PlaceRecord(
                id=rid, path=os.path.normpath(os.path.join(base, str(obj["path"]))),
                x=x, y=y, split=split,
            ))
    if check_images:
        broken = [r.id for r in records if not os.path.isfile(r.path)]
        if broken:
            raise BrokenRecordError(f"missing image files for ids: {broken}")
    return Dataset(records)


def save_manifest(records, path):
    """Write records as JSON lines, paths relative to the manifest directory."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            rel = os.path.relpath(r.path, base)
            f.write(json.dumps({
                "id": r.id, "path": rel, "x_m": r.x, "y_m": r.y, "split": r.split,
            }, sort_keys=True) + "\n")


def load_image(path) -> np.ndarray:
    """Load an image file as (H, W, 3) float32 in [0, 1]."""
    with PilImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def save_image(path, img: np.ndarray):
    """Write a float [0, 1] image as 8-bit PNG (or whatever the suffix says)."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    PilImage.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)
