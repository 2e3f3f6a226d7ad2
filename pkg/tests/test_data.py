import numpy as np
import pytest

from tpocnn import data
from tpocnn.data import (
    BandStats,
    DatasetDescriptor,
    HsiCube,
    LabelRaster,
    apply_descriptor,
    compute_band_stats,
    generate_synthetic_cube,
    load_cube,
    load_descriptor,
    load_labels,
    load_split,
    make_split,
    normalize,
    save_cube,
    save_descriptor,
    save_labels,
    save_split,
)
from tpocnn.errors import DataError, FormatError, LengthError, ShapeError, SplitError


def two_pass_stats(cube):
    """Independent two-pass mean/std oracle over each band."""
    means, stds = [], []
    for j in range(cube.bands):
        flat = cube.values[j].reshape(-1).astype(np.float64)
        mu = sum(flat) / flat.size
        var = sum((x - mu) ** 2 for x in flat) / flat.size
        means.append(mu)
        stds.append(np.sqrt(var))
    return np.array(means), np.array(stds)


class TestCubeType:
    def test_rejects_nan(self):
        bad = np.zeros((1, 2, 2), dtype=np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(DataError):
            HsiCube(bad)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            HsiCube(np.zeros((2, 2), dtype=np.float32))

    def test_values_are_read_only(self):
        cube = HsiCube(np.zeros((1, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError):
            cube.values[0, 0, 0] = 1.0

    def test_from_hwd_layout(self):
        arr = np.arange(12, dtype=np.float32).reshape(2, 3, 2)
        cube = HsiCube.from_array(arr, layout="hwd")
        assert (cube.bands, cube.height, cube.width) == (2, 2, 3)
        assert cube.values[1, 0, 2] == arr[0, 2, 1]


class TestCubeFile:
    def test_layout_read_back(self, tmp_path):
        path = tmp_path / "tiny.hsc1"
        cube = HsiCube(np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32).reshape(1, 2, 2))
        save_cube(path, cube)
        loaded = load_cube(path)
        assert (loaded.height, loaded.width, loaded.bands) == (2, 2, 1)
        assert loaded.values[0, 0, 0] == 1.0
        assert loaded.values[0, 1, 1] == 4.0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.hsc1"
        path.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(FormatError):
            load_cube(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.hsc1"
        cube = HsiCube(np.zeros((2, 3, 3), dtype=np.float32))
        save_cube(path, cube)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(LengthError):
            load_cube(path)

    def test_nonfinite_payload(self, tmp_path):
        path = tmp_path / "inf.hsc1"
        cube = HsiCube(np.zeros((1, 2, 2), dtype=np.float32))
        save_cube(path, cube)
        blob = bytearray(path.read_bytes())
        blob[16:20] = np.array([np.inf], dtype="<f4").tobytes()
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError):
            load_cube(path)

    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(42)
        cube = HsiCube(rng.normal(size=(11, 7, 5)).astype(np.float32))
        p1, p2 = tmp_path / "a.hsc1", tmp_path / "b.hsc1"
        save_cube(p1, cube)
        save_cube(p2, load_cube(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_label_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        raster = LabelRaster(rng.integers(0, 9, size=(6, 8)).astype(np.uint16))
        p1, p2 = tmp_path / "a.hsl1", tmp_path / "b.hsl1"
        save_labels(p1, raster)
        save_labels(p2, load_labels(p1))
        assert p1.read_bytes() == p2.read_bytes()
        np.testing.assert_array_equal(load_labels(p1).labels, raster.labels)


class TestBandStats:
    def test_constant_band(self):
        cube = HsiCube(np.ones((1, 2, 2), dtype=np.float32))
        stats = compute_band_stats(cube)
        assert stats.mean[0] == 1.0
        assert stats.std[0] == 0.0

    def test_two_point_band(self):
        cube = HsiCube(np.array([0.0, 2.0], dtype=np.float32).reshape(1, 1, 2))
        stats = compute_band_stats(cube)
        assert stats.mean[0] == 1.0
        assert stats.std[0] == 1.0

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(7)
        cube = HsiCube(rng.normal(3.0, 2.5, size=(3, 4, 4)).astype(np.float32))
        stats = compute_band_stats(cube)
        mu, sd = two_pass_stats(cube)
        np.testing.assert_allclose(stats.mean, mu, rtol=1e-12)
        np.testing.assert_allclose(stats.std, sd, rtol=1e-12)

    def test_negative_std_rejected(self):
        with pytest.raises(DataError):
            BandStats(np.zeros(2), np.array([1.0, -0.5]))


class TestNormalize:
    def test_constant_band_maps_to_zero(self):
        cube = HsiCube(np.full((1, 3, 3), 7.0, dtype=np.float32))
        out = normalize(cube, compute_band_stats(cube))
        np.testing.assert_array_equal(out.values, 0.0)

    def test_hand_case(self):
        cube = HsiCube(np.array([0.0, 2.0], dtype=np.float32).reshape(1, 1, 2))
        out = normalize(cube, compute_band_stats(cube))
        np.testing.assert_allclose(out.values.reshape(-1), [-1.0, 1.0])

    def test_output_stats_are_standard(self):
        rng = np.random.default_rng(11)
        cube = HsiCube(rng.normal(5.0, 3.0, size=(4, 8, 8)).astype(np.float32))
        out = normalize(cube, compute_band_stats(cube))
        redone = compute_band_stats(out)
        assert np.max(np.abs(redone.mean)) < 1e-6
        assert np.max(np.abs(redone.std - 1.0)) < 1e-6

    def test_band_count_mismatch(self):
        cube = HsiCube(np.zeros((2, 2, 2), dtype=np.float32))
        with pytest.raises(ShapeError):
            normalize(cube, BandStats(np.zeros(3), np.ones(3)))


class TestApplyDescriptor:
    def test_band_discard_220_to_200(self):
        cube = HsiCube(np.zeros((220, 2, 2), dtype=np.float32))
        labels = LabelRaster(np.ones((2, 2), dtype=np.uint16))
        desc = DatasetDescriptor(name="ip", discarded_bands=tuple(range(20)))
        out, _ = apply_descriptor(cube, labels, desc)
        assert out.bands == 200

    def test_zero_threshold_is_noop(self):
        cube = HsiCube(np.zeros((2, 3, 3), dtype=np.float32))
        lab = np.array([[1, 2, 0], [2, 1, 3], [3, 3, 3]], dtype=np.uint16)
        _, out = apply_descriptor(cube, LabelRaster(lab), DatasetDescriptor(name="x"))
        np.testing.assert_array_equal(out.labels, lab)

    def test_rejection_compacts_ids(self):
        h, w = 40, 40
        lab = np.zeros((h, w), dtype=np.uint16)
        flat = lab.reshape(-1)
        flat[:500] = 1
        flat[500:899] = 2
        flat[899:1300] = 3
        counts = {c: int((lab == c).sum()) for c in (1, 2, 3)}
        assert counts == {1: 500, 2: 399, 3: 401}
        cube = HsiCube(np.zeros((2, h, w), dtype=np.float32))
        _, out = apply_descriptor(cube, LabelRaster(lab), DatasetDescriptor(name="x", min_class_size=400))
        assert out.class_ids() == [1, 2]
        assert int((out.labels == 1).sum()) == 500
        assert int((out.labels == 2).sum()) == 401

    def test_never_increases_bands_or_classes(self):
        rng = np.random.default_rng(3)
        cube = HsiCube(rng.normal(size=(10, 6, 6)).astype(np.float32))
        lab = LabelRaster(rng.integers(0, 5, size=(6, 6)).astype(np.uint16))
        for threshold in (0, 3, 10, 100):
            desc = DatasetDescriptor(name="x", discarded_bands=(0, 5), min_class_size=threshold)
            out_cube, out_lab = apply_descriptor(cube, lab, desc)
            assert out_cube.bands <= cube.bands
            assert len(out_lab.class_ids()) <= len(lab.class_ids())


class TestMakeSplit:
    def test_exhaustion_case(self):
        lab = np.zeros((4, 4), dtype=np.uint16)
        lab[0, :3] = 1
        lab[2, :] = 2
        split = make_split(LabelRaster(lab), per_class=3, seed=0)
        train_c1 = [p for p in split.train_pixels if p[2] == 1]
        test_c1 = [p for p in split.test_pixels if p[2] == 1]
        assert len(train_c1) == 3 and len(test_c1) == 0

    def test_deterministic(self):
        _, labels = generate_synthetic_cube(10, 10, 3, 3, seed=5)
        a = make_split(labels, per_class=7, seed=9)
        b = make_split(labels, per_class=7, seed=9)
        assert a == b

    def test_partition_oracle(self):
        _, labels = generate_synthetic_cube(12, 12, 3, 4, seed=2)
        split = make_split(labels, per_class=10, seed=1)
        lab = labels.labels
        for cls in labels.class_ids():
            all_pixels = {(r, c) for r, c in zip(*np.nonzero(lab == cls))}
            train = {(r, c) for r, c, k in split.train_pixels if k == cls}
            test = {(r, c) for r, c, k in split.test_pixels if k == cls}
            assert train | test == all_pixels
            assert train & test == set()
            assert len(train) == min(10, len(all_pixels))

    def test_empty_class_named_in_error(self):
        lab = np.zeros((3, 3), dtype=np.uint16)
        lab[0, 0] = 1
        with pytest.raises(SplitError, match="class 2"):
            make_split(LabelRaster(lab), per_class=1, seed=0, class_count=2)

    def test_split_file_roundtrip(self, tmp_path):
        _, labels = generate_synthetic_cube(8, 8, 3, 2, seed=0)
        split = make_split(labels, per_class=5, seed=3)
        path = tmp_path / "split.txt"
        save_split(path, split)
        loaded = load_split(path, per_class_count=5, rng_seed=3)
        assert loaded.train_pixels == split.train_pixels
        assert loaded.test_pixels == split.test_pixels


class TestSyntheticCube:
    def test_constructive_shape_and_classes(self):
        cube, labels = generate_synthetic_cube(16, 16, 10, 3, seed=1)
        assert (cube.height, cube.width, cube.bands) == (16, 16, 10)
        assert labels.class_ids() == [1, 2, 3]

    def test_bit_identical_given_seed(self):
        a_cube, a_lab = generate_synthetic_cube(9, 13, 5, 3, seed=77)
        b_cube, b_lab = generate_synthetic_cube(9, 13, 5, 3, seed=77)
        assert a_cube.values.tobytes() == b_cube.values.tobytes()
        assert a_lab.labels.tobytes() == b_lab.labels.tobytes()

    def test_nearest_centroid_is_perfect_without_noise(self):
        cube, labels = generate_synthetic_cube(12, 12, 8, 3, seed=4, noise=0.0)
        spectra = cube.values.reshape(cube.bands, -1).T
        lab = labels.labels.reshape(-1)
        centroids = np.stack([spectra[lab == c].mean(axis=0) for c in (1, 2, 3)])
        d = ((spectra[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        predicted = d.argmin(axis=1) + 1
        assert np.all(predicted == lab)

    def test_stripe_layout_cycles_classes(self):
        _, labels = generate_synthetic_cube(6, 12, 4, 3, seed=0, stripe_width=2)
        row = labels.labels[0]
        np.testing.assert_array_equal(row[:6], [1, 1, 2, 2, 3, 3])
        np.testing.assert_array_equal(row[6:], row[:6])


class TestDescriptorFile:
    def test_roundtrip(self, tmp_path):
        desc = DatasetDescriptor(name="indian_pines",
                                 class_names=("corn", "wheat"),
                                 discarded_bands=(0, 1, 219),
                                 min_class_size=400)
        path = tmp_path / "ip.cfg"
        save_descriptor(path, desc)
        assert load_descriptor(path) == desc

    def test_duplicate_bands_rejected(self):
        with pytest.raises(DataError):
            DatasetDescriptor(name="x", discarded_bands=(1, 1))
