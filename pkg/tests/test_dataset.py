"""Manifest round-trips, validation errors, synthetic world contracts."""

import hashlib
import json
import os

import numpy as np
import pytest

from mrvlad import synthetic
from mrvlad.dataset import (
    Dataset,
    PlaceRecord,
    load_image,
    load_manifest,
    save_image,
    save_manifest,
)
from mrvlad.errors import BrokenRecordError, ConfigError, DuplicateIdError, ManifestError
from mrvlad.synthetic import SyntheticWorldConfig, generate_synthetic


def small_world(seed=5, **kw):
    defaults = dict(extent=120.0, landmark_count=700, camera_spacing=10.0, seed=seed,
                    query_stride_train=3, query_stride_eval=2)
    defaults.update(kw)
    return SyntheticWorldConfig(**defaults)


class TestManifest:
    def test_empty_file_gives_empty_dataset(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text("")
        ds = load_manifest(path)
        assert len(ds) == 0
        assert all(v == 0 for v in ds.split_counts().values())

    def test_round_trip_1000_records_field_identical(self, tmp_path):
        rng = np.random.default_rng(0)
        img = tmp_path / "img.png"
        save_image(img, rng.random((8, 8, 3)))
        records = [
            PlaceRecord(id=f"r{i:04d}", path=str(img),
                        x=float(rng.uniform(0, 500)), y=float(rng.uniform(0, 500)),
                        split=["train_db", "train_q", "val_db",
                               "val_q", "test_db", "test_q"][i % 6])
            for i in range(1000)
        ]
        path = tmp_path / "manifest.jsonl"
        save_manifest(records, path)
        loaded = load_manifest(path)
        assert len(loaded) == 1000
        for a, b in zip(records, loaded.records):
            assert (a.id, a.x, a.y, a.split) == (b.id, b.x, b.y, b.split)
            assert os.path.samefile(a.path, b.path)

    def test_duplicate_id_rejected_with_name(self, tmp_path):
        img = tmp_path / "img.png"
        save_image(img, np.zeros((4, 4, 3)))
        line = json.dumps({"id": "dup", "path": "img.png", "x_m": 0, "y_m": 0,
                           "split": "train_db"})
        path = tmp_path / "manifest.jsonl"
        path.write_text(line + "\n" + line + "\n")
        with pytest.raises(DuplicateIdError, match="dup"):
            load_manifest(path)

    def test_malformed_line_reports_line_number(self, tmp_path):
        img = tmp_path / "img.png"
        save_image(img, np.zeros((4, 4, 3)))
        good = json.dumps({"id": "a", "path": "img.png", "x_m": 0, "y_m": 0,
                           "split": "train_db"})
        path = tmp_path / "manifest.jsonl"
        path.write_text(good + "\n{not json\n")
        with pytest.raises(ManifestError, match=":2"):
            load_manifest(path)

    def test_missing_keys_reported(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text(json.dumps({"id": "a", "path": "x.png"}) + "\n")
        with pytest.raises(ManifestError, match="missing keys"):
            load_manifest(path)

    def test_missing_image_lists_broken_ids(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text(json.dumps({"id": "ghost", "path": "nope.png", "x_m": 1,
                                    "y_m": 2, "split": "val_db"}) + "\n")
        with pytest.raises(BrokenRecordError, match="ghost"):
            load_manifest(path)
        ds = load_manifest(path, check_images=False)
        assert ds.records[0].id == "ghost"

    def test_unknown_split_rejected(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text(json.dumps({"id": "a", "path": "x.png", "x_m": 0, "y_m": 0,
                                    "split": "holdout"}) + "\n")
        with pytest.raises(ManifestError, match="holdout"):
            load_manifest(path)

    def test_non_finite_position_rejected(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text(json.dumps({"id": "a", "path": "x.png", "x_m": "nan",
                                    "y_m": 0, "split": "val_db"}) + "\n")
        with pytest.raises(ManifestError, match="non-finite"):
            load_manifest(path)

    def test_dataset_duplicate_guard(self):
        r = PlaceRecord(id="x", path="p", x=0, y=0, split="train_db")
        with pytest.raises(DuplicateIdError):
            Dataset([r, r])


class TestImages:
    def test_image_round_trip_is_exact_at_8bit(self, tmp_path):
        rng = np.random.default_rng(1)
        img = (rng.integers(0, 256, (16, 16, 3)) / 255.0).astype(np.float32)
        path = tmp_path / "img.png"
        save_image(path, img)
        back = load_image(path)
        np.testing.assert_allclose(back, img, atol=1e-7)
        assert back.dtype == np.float32


class TestSyntheticWorld:
    def test_generation_is_byte_identical(self, tmp_path):
        cfg = small_world()
        for sub in ("a", "b"):
            generate_synthetic(cfg, tmp_path / sub)

        def digest(root):
            h = hashlib.sha256()
            for dirpath, _, files in sorted(os.walk(root)):
                for fn in sorted(files):
                    h.update(fn.encode())
                    with open(os.path.join(dirpath, fn), "rb") as f:
                        h.update(f.read())
            return h.hexdigest()

        assert digest(tmp_path / "a") == digest(tmp_path / "b")

    def test_zero_jitter_same_appearance_query_is_pixel_identical(self, tmp_path):
        cfg = small_world(jitter_lateral=1e-9, jitter_heading_deg=0.0,
                          appearance_query="day", noise_level=0.0)
        ds, _ = generate_synthetic(cfg, tmp_path)
        for q in ds.split("train_q")[:3]:
            counterpart = q.id.replace("-q-", "-db-")
            a = load_image(q.path)
            b = load_image(ds.by_id[counterpart].path)
            np.testing.assert_array_equal(a, b)

    def test_far_records_share_no_landmarks(self, tmp_path):
        # oracle from world geometry: a camera only ever renders landmarks
        # within the view radius, so cameras beyond the negative radius
        # (25 m > 2 * view radius) can share none
        cfg = small_world(seed=7)
        ds, world = generate_synthetic(cfg, tmp_path)
        with open(tmp_path / "world.json", encoding="utf-8") as f:
            blob = json.load(f)
        xy = np.array(blob["landmarks"]["xy"])
        r_vis = blob["view_radius_m"]
        assert 2 * r_vis < 25.0
        cams = blob["cameras"]
        rng = np.random.default_rng(0)
        pairs = 0
        for _ in range(300):
            a, b = rng.integers(0, len(cams), 2)
            ca, cb = cams[a], cams[b]
            d = np.hypot(ca["x"] - cb["x"], ca["y"] - cb["y"])
            if d <= 25.0:
                continue
            vis_a = set(np.nonzero(np.hypot(xy[:, 0] - ca["x"],
                                            xy[:, 1] - ca["y"]) <= r_vis)[0])
            vis_b = set(np.nonzero(np.hypot(xy[:, 0] - cb["x"],
                                            xy[:, 1] - cb["y"]) <= r_vis)[0])
            assert not (vis_a & vis_b)
            pairs += 1
        assert pairs > 100

    def test_every_query_has_database_record_within_positive_radius(self, tmp_path):
        cfg = small_world(seed=8)
        ds, _ = generate_synthetic(cfg, tmp_path)
        for prefix in ("train", "val", "test"):
            db = np.array([[r.x, r.y] for r in ds.split(prefix + "_db")])
            for q in ds.split(prefix + "_q"):
                d = np.hypot(db[:, 0] - q.x, db[:, 1] - q.y)
                assert d.min() <= 10.0

    def test_split_counts_cover_all_six(self, tmp_path):
        ds, _ = generate_synthetic(small_world(), tmp_path)
        counts = ds.split_counts()
        for split in ("train_db", "train_q", "val_db", "val_q", "test_db", "test_q"):
            assert counts[split] > 0

    def test_visible_landmarks_helper_matches_distance_rule(self, tmp_path):
        cfg = small_world(seed=9)
        world = synthetic.build_world(cfg)
        idx = synthetic.visible_landmarks(world, 50.0, 50.0)
        d = np.hypot(world.xy[:, 0] - 50.0, world.xy[:, 1] - 50.0)
        np.testing.assert_array_equal(np.sort(idx), np.nonzero(d <= synthetic.VIEW_RADIUS)[0])

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SyntheticWorldConfig(camera_spacing=0.0)
        with pytest.raises(ConfigError):
            SyntheticWorldConfig(extent=50.0)
        with pytest.raises(ConfigError):
            SyntheticWorldConfig(jitter_lateral=9.0)
        with pytest.raises(ConfigError):
            SyntheticWorldConfig(night_strength=1.5)
        with pytest.raises(ConfigError):
            SyntheticWorldConfig(appearance_query="fog")

    def test_night_rendering_differs_from_day(self, tmp_path):
        cfg = small_world(seed=10, night_strength=0.5)
        world = synthetic.build_world(cfg)
        day = synthetic.render_view(world, 60.0, 60.0, 0.3, "day")
        night = synthetic.render_view(world, 60.0, 60.0, 0.3, "night")
        assert day.shape == night.shape
        assert np.abs(day - night).max() > 0.05
