from dataclasses import replace

import numpy as np
import pytest
import tifffile
from hypothesis import given, settings
from hypothesis.extra.numpy import arrays
from PIL import Image

from landslide_seg.acceptance import dense_kriging_oracle, naive_candidates
from landslide_seg.config import ConfigError, ContrastiveConfig, SyntheticTerrainConfig
from landslide_seg.contrastive import LANDSLIDE, enumerate_candidates
from landslide_seg.data import (
    DEMInterpolator,
    HistogramEqualizer,
    KrigingError,
    OrdinaryKriging,
    SceneSample,
    augment,
    equalize_histogram,
    generate_synthetic_dataset,
    generate_synthetic_scene,
    interpolate_dem,
    load_dataset,
    load_scene,
    prepare_sample,
    split_dataset,
    write_scene,
)
from landslide_seg.data.interpolation import grid_centres, spherical_variogram
from landslide_seg.data.preprocess import TRANSFORMS, apply_transform
from landslide_seg.data.scene import list_scene_ids
from landslide_seg.data.split import DatasetSplit, largest_remainder
from landslide_seg.data.synthetic import coarsen_dem
from landslide_seg.validation import DataError


def _write_triple(tmp_path, hrsi, dem, label, dem_res=None):
    tifffile.imwrite(tmp_path / "hrsi.tif", hrsi, photometric="rgb")
    if dem_res is None:
        tifffile.imwrite(tmp_path / "dem.tif", dem)
    else:
        tifffile.imwrite(tmp_path / "dem.tif", dem,
                         extratags=[(33550, "d", 3, (dem_res, dem_res, 0.0), True)])
    tifffile.imwrite(tmp_path / "label.tif", label)
    return tmp_path / "hrsi.tif", tmp_path / "dem.tif", tmp_path / "label.tif"


# -- loading -------------------------------------------------------------


def test_load_valid_512_triple(tmp_path, rng):
    paths = _write_triple(tmp_path, rng.integers(0, 256, (512, 512, 3), dtype=np.uint8),
                          rng.normal(500, 20, (512, 512)).astype(np.float32),
                          np.zeros((512, 512), np.uint8))
    s = load_scene(*paths)
    assert s.shape == (512, 512)
    assert not s.needs_interpolation


def test_label_with_value_two_is_rejected(tmp_path, rng):
    label = np.zeros((64, 64), np.uint8)
    label[3, 3] = 2
    paths = _write_triple(tmp_path, rng.integers(0, 256, (64, 64, 3), dtype=np.uint8),
                          np.zeros((64, 64), np.float32), label)
    with pytest.raises(DataError, match="invalid label value"):
        load_scene(*paths)


def test_coarse_dem_is_kept_and_flagged(tmp_path, rng):
    paths = _write_triple(tmp_path, rng.integers(0, 256, (512, 512, 3), dtype=np.uint8),
                          rng.normal(500, 20, (35, 35)).astype(np.float32),
                          np.zeros((512, 512), np.uint8), dem_res=30.0)
    s = load_scene(*paths)
    assert s.dem.shape == (35, 35)
    assert s.dem_resolution_m == 30.0 and s.resolution_m == 2.0
    assert s.needs_interpolation


def test_dem_that_does_not_cover_the_scene_is_a_mismatch(tmp_path, rng):
    paths = _write_triple(tmp_path, rng.integers(0, 256, (512, 512, 3), dtype=np.uint8),
                          np.zeros((30, 30), np.float32), np.zeros((512, 512), np.uint8), dem_res=30.0)
    with pytest.raises(DataError, match="dimension mismatch"):
        load_scene(*paths)


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="missing"):
        load_scene(tmp_path / "a.tif", tmp_path / "b.tif", tmp_path / "c.tif")


def test_png_rasters_with_dem_scale(tmp_path, rng):
    hrsi = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    raw = rng.integers(0, 60000, (32, 32)).astype(np.uint16)
    Image.fromarray(hrsi).save(tmp_path / "hrsi.png")
    Image.fromarray(raw).save(tmp_path / "dem.png")
    Image.fromarray(np.eye(32, dtype=np.uint8)).save(tmp_path / "label.png")
    s = load_scene(tmp_path / "hrsi.png", tmp_path / "dem.png", tmp_path / "label.png",
                   dem_scale=0.1, dem_offset=-100.0)
    np.testing.assert_allclose(s.dem, raw * 0.1 - 100.0)
    np.testing.assert_array_equal(s.hrsi, hrsi)


def test_write_then_load_dataset_roundtrip(tmp_path):
    cfg = SyntheticTerrainConfig(size=(64, 64), min_candidates=8, native_dem_resolution_m=30.0)
    scenes = generate_synthetic_dataset(2, cfg, ContrastiveConfig())
    for s in scenes:
        write_scene(s, tmp_path)
    assert list_scene_ids(tmp_path) == [s.id for s in scenes]
    loaded = load_dataset(tmp_path)
    for a, b in zip(scenes, loaded):
        np.testing.assert_array_equal(a.hrsi, b.hrsi)
        np.testing.assert_array_equal(a.label, b.label)
        np.testing.assert_allclose(a.dem, b.dem, rtol=1e-6)
        assert b.dem_resolution_m == 30.0 and b.needs_interpolation


# -- interpolation -------------------------------------------------------


@pytest.mark.parametrize("method", ["kriging", "bilinear"])
def test_constant_field_is_reproduced_exactly(method):
    out = interpolate_dem(np.full((5, 7), 100.0), 30.0, 2.0, method)
    assert out.shape == (75, 105)
    assert np.all(out == 100.0)


def test_bilinear_is_exact_on_planes():
    centres = grid_centres((6, 6), 30.0)
    plane = (2 * centres[:, 0] + 3 * centres[:, 1]).reshape(6, 6)
    out = interpolate_dem(plane, 30.0, 2.0, "bilinear")
    fine = grid_centres(out.shape, 2.0)
    np.testing.assert_allclose(out.ravel(), 2 * fine[:, 0] + 3 * fine[:, 1], rtol=0, atol=1e-9)


def test_kriging_matches_dense_solver_on_4x4(rng):
    coords = grid_centres((4, 4), 30.0)
    z = rng.normal(300.0, 10.0, 16)
    model = OrdinaryKriging(nugget=0.0, sill=50.0, range_=90.0).fit(coords, z)
    queries = np.vstack([coords[5], rng.uniform(0, 120, (20, 2))])
    oracle = dense_kriging_oracle(coords, z, queries,
                                  lambda h: spherical_variogram(h, 0.0, 50.0, 90.0))
    np.testing.assert_allclose(model.predict(queries), oracle, rtol=1e-9)
    assert abs(model.predict(coords[5:6])[0] - z[5]) <= 1e-6 * max(1.0, abs(z[5]))


@pytest.mark.parametrize("variogram", ["spherical", "exponential"])
def test_kriging_is_exact_at_nodes_with_fitted_variogram(rng, variogram):
    coords = grid_centres((6, 6), 30.0)
    z = 800 + 0.2 * coords[:, 0] + rng.normal(0, 3, 36)
    pred = OrdinaryKriging(variogram=variogram).fit(coords, z).predict(coords)
    assert np.max(np.abs(pred - z) / np.maximum(1, np.abs(z))) <= 1e-6


def test_duplicate_coordinates_are_named():
    coords = np.array([[0.0, 0.0], [30.0, 0.0], [30.0, 0.0], [0.0, 30.0]])
    with pytest.raises(KrigingError, match=r"30\.0"):
        OrdinaryKriging().fit(coords, np.arange(4.0))


def test_non_positive_definite_variogram_is_rejected():
    coords = grid_centres((3, 3), 30.0)
    with pytest.raises(KrigingError):
        OrdinaryKriging(nugget=0.0, sill=-5.0, range_=60.0).fit(coords, np.arange(9.0))


def test_output_grid_matches_optical_shape(rng):
    dem = rng.normal(0, 1, (35, 35))
    out = interpolate_dem(dem, 30.0, 2.0, "bilinear", out_shape=(512, 512))
    assert out.shape == (512, 512)
    with pytest.raises(DataError):
        interpolate_dem(dem, 2.0, 30.0, "bilinear")


def test_dem_interpolator_transformer_stacks():
    X = np.full((2, 4, 4), 7.0)
    out = DEMInterpolator(method="bilinear").fit_transform(X)
    assert out.shape == (2, 60, 60) and np.all(out == 7.0)


def test_coarsen_then_krige_tracks_fine_dem():
    scene = generate_synthetic_scene(SyntheticTerrainConfig(size=(64, 64), min_candidates=8, seed=3))
    coarse = coarsen_dem(scene.dem, 2.0, 30.0)
    assert coarse.shape == (5, 5)
    back = interpolate_dem(coarse, 30.0, 2.0, "kriging", out_shape=(64, 64))
    assert np.abs(back - scene.dem).mean() < 0.25 * scene.dem.std() + 5.0


# -- histogram equalization ----------------------------------------------


def test_single_valued_image_maps_to_255():
    out = equalize_histogram(np.full((8, 8, 3), 7, np.uint8))
    assert np.all(out == 255)


def test_two_level_image_maps_to_127_and_255():
    img = np.zeros((8, 8, 3), np.uint8)
    img[4:] = 255
    out = equalize_histogram(img)
    assert set(np.unique(out).tolist()) == {127, 255}
    assert np.all(out[:4] == 127)


def test_uniform_histogram_is_near_identity():
    img = np.repeat(np.arange(256, dtype=np.uint8), 3).reshape(16, 16, 3)
    out = equalize_histogram(img).astype(int)
    assert np.abs(out - img.astype(int)).max() <= 1


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (6, 7, 3)))
def test_equalization_preserves_rank_order(img):
    out = equalize_histogram(img)
    for c in range(3):
        order = np.argsort(img[..., c].ravel(), kind="stable")
        assert np.all(np.diff(out[..., c].ravel()[order].astype(int)) >= 0)


def test_histogram_equalizer_transformer(rng):
    X = rng.integers(0, 256, (3, 8, 8, 3), dtype=np.uint8)
    out = HistogramEqualizer().fit_transform(X)
    np.testing.assert_array_equal(out[1], equalize_histogram(X[1]))


# -- augmentation --------------------------------------------------------


@pytest.fixture(scope="module")
def square_scene():
    return generate_synthetic_scene(SyntheticTerrainConfig(size=(64, 64), min_candidates=8, seed=11))


def test_augment_returns_six_jointly_transformed_samples(square_scene):
    out = augment(square_scene)
    assert len(out) == 6
    assert len({s.id for s in out}) == 6
    for s, fn in zip(out, TRANSFORMS.values()):
        np.testing.assert_array_equal(s.label, fn(square_scene.label))
        np.testing.assert_array_equal(s.dem, fn(square_scene.dem))
        np.testing.assert_array_equal(s.hrsi, fn(square_scene.hrsi))


def test_rot180_is_hflip_then_vflip(square_scene):
    rot = apply_transform(square_scene, "rot180")
    both = apply_transform(apply_transform(square_scene, "hflip"), "vflip")
    for name in ("hrsi", "dem", "label"):
        np.testing.assert_array_equal(getattr(rot, name), getattr(both, name))


def test_hflip_is_an_involution(square_scene):
    twice = apply_transform(apply_transform(square_scene, "hflip"), "hflip")
    for name in ("hrsi", "dem", "label"):
        assert np.array_equal(getattr(twice, name), getattr(square_scene, name))


def test_rotations_need_square_rasters():
    s = SceneSample("r", np.zeros((16, 32, 3), np.uint8), np.zeros((16, 32)), np.zeros((16, 32), np.uint8))
    assert len(apply_transform(s, "rot180").label) == 16
    with pytest.raises(DataError):
        augment(s)


def _candidate_grid(sample):
    found = enumerate_candidates(sample.label, sample.dem)
    g = np.zeros((sample.label.shape[0] // 8, sample.label.shape[1] // 8), np.int8)
    for c in found:
        g[c.grid_pos] = 2 if c.cls == LANDSLIDE else 1
    return g


@pytest.mark.parametrize("name", list(TRANSFORMS))
def test_transforms_commute_with_candidate_rule(square_scene, name):
    moved = apply_transform(square_scene, name)
    np.testing.assert_array_equal(_candidate_grid(moved), TRANSFORMS[name](_candidate_grid(square_scene)))


# -- splitting -----------------------------------------------------------


def test_ten_samples_five_folds():
    ids = [f"s{i}" for i in range(10)]
    split = split_dataset(ids, folds=5, seed=0)
    tests = [set(split.partition(f, "test")) for f in range(5)]
    assert all(len(t) == 2 for t in tests)
    assert set().union(*tests) == set(ids)
    for f in range(5):
        parts = [set(split.partition(f, p)) for p in ("train", "val", "test")]
        assert sum(map(len, parts)) == 10 and not (parts[0] & parts[1]) and not (parts[1] & parts[2])


def test_168_samples_partition_sizes():
    sizes = largest_remainder(168, (6, 2, 2))
    assert sum(sizes) == 168
    assert all(abs(a - b) <= 1 for a, b in zip(sizes, (100, 34, 34)))
    split = split_dataset([f"s{i}" for i in range(168)], folds=5, seed=1)
    for f in range(5):
        sizes = [len(split.partition(f, p)) for p in ("train", "val", "test")]
        assert sizes[1] == 34
        assert abs(sizes[0] - 100) <= 1 and abs(sizes[2] - 34) <= 1


def test_split_is_deterministic_and_roundtrips(tmp_path):
    ids = [f"s{i}" for i in range(23)]
    a, b = split_dataset(ids, seed=5), split_dataset(ids, seed=5)
    assert a.assignments == b.assignments
    assert split_dataset(ids, seed=6).assignments != a.assignments
    a.write(tmp_path / "split.csv")
    assert DatasetSplit.read(tmp_path / "split.csv").assignments == a.assignments


def test_split_needs_as_many_samples_as_folds():
    with pytest.raises(DataError):
        split_dataset(["a", "b", "c"], folds=5)


def test_split_manifest_rejects_bad_lines(tmp_path):
    (tmp_path / "bad.csv").write_text("0,a,holdout\n")
    with pytest.raises(DataError):
        DatasetSplit.read(tmp_path / "bad.csv")


# -- synthetic terrain ---------------------------------------------------


def test_synthetic_scene_is_deterministic():
    a = generate_synthetic_scene(SyntheticTerrainConfig(seed=1))
    b = generate_synthetic_scene(SyntheticTerrainConfig(seed=1))
    for name in ("hrsi", "dem", "label"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_no_scarps_gives_background_only():
    s = generate_synthetic_scene(SyntheticTerrainConfig(seed=2, scarp_count=(0, 0)))
    assert s.label.sum() == 0
    assert not enumerate_candidates(s.label, s.dem).landslide


@pytest.mark.parametrize("seed", range(5))
def test_oracle_finds_sixteen_candidates(seed):
    s = generate_synthetic_scene(SyntheticTerrainConfig(seed=seed, scarp_depth_m=(20.0, 30.0)))
    land, _ = naive_candidates(s.label, s.dem)
    assert len(land) >= 16


@pytest.mark.parametrize("seed", range(5))
def test_scarp_rim_is_steep(seed):
    cfg = SyntheticTerrainConfig(seed=seed, scarp_count=(1, 1), scarp_depth_m=(20.0, 20.0))
    s = generate_synthetic_scene(cfg)
    inside = s.label.astype(bool)
    drop = 0.0
    for axis in (0, 1):
        for k in range(1, 5):
            for sign in (1, -1):
                shifted = np.roll(s.dem, sign * k, axis=axis)
                outside = ~np.roll(inside, sign * k, axis=axis)
                drop = max(drop, float(np.max(np.where(outside & inside, shifted - s.dem, -np.inf))))
    assert drop >= 20.0


def test_synthetic_coarse_dem_mode():
    cfg = SyntheticTerrainConfig(size=(64, 64), min_candidates=8, native_dem_resolution_m=30.0)
    s = generate_synthetic_scene(cfg)
    assert s.dem.shape == (5, 5) and s.needs_interpolation
    assert prepare_sample(s, equalize=False).dem.shape == (64, 64)


def test_scene_too_small_for_scarp():
    with pytest.raises(ConfigError):
        generate_synthetic_scene(SyntheticTerrainConfig(size=(32, 32)))


def test_optical_raster_is_eight_bit_rgb():
    s = generate_synthetic_scene(replace(SyntheticTerrainConfig(), seed=4))
    assert s.hrsi.dtype == np.uint8 and s.hrsi.shape == (128, 128, 3)
    assert s.hrsi.std() > 5
