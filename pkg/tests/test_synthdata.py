import json
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from beal.synthdata import (
    DatasetConfig,
    DatasetError,
    GeometryParams,
    StyleParams,
    StyleRange,
    generate_dataset,
    generate_sample,
    histogram_distance,
    load_dataset,
    manifest_checksum,
    read_manifest,
)

GEOM = GeometryParams(disc_center=(64.0, 64.0), disc_radius=30.0, cup_radius_ratio=0.5)


def test_cup_to_disc_area_ratio():
    s = generate_sample(0, GEOM, StyleParams(), 128)
    ratio = s.oc_mask.sum() / s.od_mask.sum()
    # analytic area ratio of concentric similar ellipses is k^2
    assert abs(ratio - 0.25) <= 0.05 * 0.25


def test_style_does_not_change_geometry():
    a = generate_sample(3, GEOM, StyleParams(), 128)
    b = generate_sample(3, GEOM, StyleParams(base_hue=40, brightness_gain=0.5, blur_sigma=2.0, texture_seed=9), 128)
    assert np.array_equal(a.od_mask, b.od_mask)
    assert np.array_equal(a.oc_mask, b.oc_mask)
    assert not np.array_equal(a.image, b.image)


def test_circular_disc_rotation_symmetric():
    s = generate_sample(0, replace(GEOM, disc_center=(63.5, 63.5)), StyleParams(), 128)
    rotated = np.rot90(s.od_mask)
    assert np.abs(rotated.astype(int) - s.od_mask).sum() <= 2 * 4  # a couple of pixels per quadrant


def test_generation_is_deterministic():
    a = generate_sample(5, GEOM, StyleParams(), 128)
    b = generate_sample(5, GEOM, StyleParams(), 128)
    assert np.array_equal(a.image, b.image)


def test_sample_invariants():
    s = generate_sample(1, replace(GEOM, ellipse_eccentricity=0.4, rotation=0.7), StyleParams(noise_sigma=0.2), 128)
    assert not np.any(s.oc_mask & ~s.od_mask)
    assert set(np.unique(s.od_mask)) <= {0, 1}
    assert s.image.min() >= 0 and s.image.max() <= 1


@pytest.mark.parametrize("geom, size", [
    (replace(GEOM, cup_radius_ratio=1.0), 128),
    (replace(GEOM, disc_center=(20.0, 64.0)), 128),
    (replace(GEOM, ellipse_eccentricity=0.7), 128),
    (GEOM, 32),
])
def test_invalid_geometry_rejected(geom, size):
    with pytest.raises(ValueError):
        generate_sample(0, geom, StyleParams(), size)


def test_style_range_rejects_inverted():
    with pytest.raises(ValueError):
        StyleRange(brightness_gain=(1.2, 0.8))


def test_dataset_counts_and_determinism(tmp_path):
    cfg = DatasetConfig(n_source=8, n_target=8, size=64, seed=1)
    a = generate_dataset(cfg, tmp_path / "a")
    b = generate_dataset(cfg, tmp_path / "b")
    records = read_manifest(a)
    assert len(records) == 16
    assert sum(r["domain"] == "source" for r in records) == 8
    assert manifest_checksum(a) == manifest_checksum(b)
    for sub in ("images", "od", "oc"):
        for f in sorted((a / sub).iterdir()):
            assert f.read_bytes() == (b / sub / f.name).read_bytes()


def test_target_darker_than_source(tmp_path):
    cfg = DatasetConfig(
        n_source=6, n_target=6, size=64, seed=2,
        source_style=StyleRange(brightness_gain=(0.9, 1.1)),
        target_style=StyleRange(brightness_gain=(0.4, 0.6)),
    )
    samples = load_dataset(generate_dataset(cfg, tmp_path / "d"))
    src = np.mean([s.image.mean() for s in samples if s.domain == "source"])
    tgt = np.mean([s.image.mean() for s in samples if s.domain == "target"])
    assert tgt < src


def test_refuses_overwrite(tmp_path):
    cfg = DatasetConfig(n_source=1, n_target=1, size=64)
    generate_dataset(cfg, tmp_path / "d")
    with pytest.raises(FileExistsError):
        generate_dataset(cfg, tmp_path / "d")
    generate_dataset(cfg, tmp_path / "d", force=True)


@pytest.mark.parametrize("bad", [dict(n_source=0), dict(n_target=0)])
def test_dataset_config_validation(tmp_path, bad):
    with pytest.raises(ValueError):
        generate_dataset(DatasetConfig(size=64, **bad), tmp_path / "x")


def test_zero_shift_rejected(tmp_path):
    same = StyleRange()
    with pytest.raises(ValueError, match="shift"):
        generate_dataset(DatasetConfig(n_source=1, n_target=1, size=64, source_style=same, target_style=same),
                         tmp_path / "x")


def test_load_round_trip(small_dataset, small_samples):
    assert len(small_samples) == len(read_manifest(small_dataset))
    for s in small_samples:
        od = np.asarray(Image.open(small_dataset / "od" / f"{s.sample_id}.png")) // 255
        assert np.array_equal(od, s.od_mask)
        assert not np.any(s.oc_mask & ~s.od_mask)


def test_load_missing_image_names_file(tmp_path):
    path = generate_dataset(DatasetConfig(n_source=2, n_target=1, size=64), tmp_path / "d")
    victim = read_manifest(path)[1]["id"]
    (path / "images" / f"{victim}.png").unlink()
    with pytest.raises(DatasetError, match=victim):
        load_dataset(path)


def test_load_corrupt_mask(tmp_path):
    path = generate_dataset(DatasetConfig(n_source=1, n_target=1, size=64), tmp_path / "d")
    victim = read_manifest(path)[0]["id"]
    Image.fromarray(np.full((64, 64), 128, np.uint8)).save(path / "od" / f"{victim}.png")
    with pytest.raises(DatasetError, match="corrupt mask"):
        load_dataset(path)


def test_manifest_records(small_dataset):
    for rec in read_manifest(small_dataset):
        assert {"id", "domain", "disc_center", "seed"} <= rec.keys()
        json.dumps(rec)


def test_shift_monotonicity(tmp_path):
    """Wider style-range separation gives a larger histogram distance between domains."""
    dists = []
    for k, gain in enumerate([0.95, 0.8, 0.65, 0.5]):
        cfg = DatasetConfig(
            n_source=8, n_target=8, size=64, seed=3,
            source_style=StyleRange(brightness_gain=(0.95, 1.05)),
            target_style=StyleRange(brightness_gain=(gain - 0.05, gain + 0.05), base_hue=(10.0, 20.0 + 1e-9)),
        )
        samples = load_dataset(generate_dataset(cfg, tmp_path / f"s{k}"))
        src = [s for s in samples if s.domain == "source"]
        tgt = [s for s in samples if s.domain == "target"]
        dists.append(histogram_distance(src, tgt))
    assert all(b > a for a, b in zip(dists, dists[1:])), dists
