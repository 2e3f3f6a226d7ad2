from collections import Counter

import numpy as np
import pytest

from tpocnn.data import HsiCube, generate_synthetic_cube, make_split
from tpocnn.errors import DataError
from tpocnn.sampler import (
    CLOCKWISE_OFFSETS,
    SamplerConfig,
    batch_iter,
    build_dataset,
    extract_tpo,
    pad_cube,
    scene_dataset,
)


def reflect_index(i, n):
    """Mirror without repeating the edge sample, for any out-of-range i."""
    while i < 0 or i >= n:
        if i < 0:
            i = -i
        else:
            i = 2 * (n - 1) - i
    return i


def oracle_extract(cube, target, cfg):
    """Brute-force per-entry window extraction through explicit reflection
    (or zero fill), independent of the padded-array implementation."""
    k = cfg.patch_size
    half = k // 2
    offsets = ((0, 0),) + (CLOCKWISE_OFFSETS if cfg.views == 9 else ())
    out = np.zeros((len(offsets), cube.bands, k, k), dtype=np.float32)
    r0, c0 = target
    for v, (dr, dc) in enumerate(offsets):
        for j in range(cube.bands):
            for a in range(k):
                for b in range(k):
                    r = r0 + dr - half + a
                    c = c0 + dc - half + b
                    if cfg.border_mode == "mirror":
                        out[v, j, a, b] = cube.values[j, reflect_index(r, cube.height),
                                                      reflect_index(c, cube.width)]
                    else:
                        inside = 0 <= r < cube.height and 0 <= c < cube.width
                        out[v, j, a, b] = cube.values[j, r, c] if inside else 0.0
    return out


def coordinate_cube(h, w, d):
    """Pixel value = 100*row + 10*col + band; unique per location."""
    rows = np.arange(h)[None, :, None]
    cols = np.arange(w)[None, None, :]
    bands = np.arange(d)[:, None, None]
    return HsiCube((100.0 * rows + 10.0 * cols + bands).astype(np.float32) * np.ones((d, h, w), dtype=np.float32))


class TestPadCube:
    def test_margin_zero_identity(self):
        cube, _ = generate_synthetic_cube(5, 5, 3, 2, seed=0)
        assert pad_cube(cube, 0, "mirror") is cube

    def test_mirror_reflects_without_edge_repeat(self):
        grid = np.tile(np.array([1.0, 2.0, 3.0], dtype=np.float32), (3, 1))
        padded = pad_cube(HsiCube(grid[None]), 1, "mirror")
        # the middle row [1,2,3] becomes [2,1,2,3,2]
        np.testing.assert_array_equal(padded.values[0, 2], [2.0, 1.0, 2.0, 3.0, 2.0])

    def test_zero_mode(self):
        grid = np.tile(np.array([1.0, 2.0], dtype=np.float32), (2, 1))
        padded = pad_cube(HsiCube(grid[None]), 1, "zero")
        np.testing.assert_array_equal(padded.values[0, 1], [0.0, 1.0, 2.0, 0.0])

    def test_interior_preserved_exhaustively(self):
        rng = np.random.default_rng(0)
        cube = HsiCube(rng.normal(size=(2, 6, 6)).astype(np.float32))
        for mode in ("mirror", "zero"):
            padded = pad_cube(cube, 2, mode)
            np.testing.assert_array_equal(padded.values[:, 2:8, 2:8], cube.values)

    def test_mirror_margin_too_large(self):
        cube, _ = generate_synthetic_cube(4, 4, 2, 2, seed=0)
        with pytest.raises(DataError):
            pad_cube(cube, 4, "mirror")


class TestExtractTpo:
    def test_constant_cube_views_identical(self):
        cube = HsiCube(np.full((3, 7, 7), 2.5, dtype=np.float32))
        views = extract_tpo(cube, (3, 3), SamplerConfig(patch_size=3))
        for v in range(1, 9):
            np.testing.assert_array_equal(views[v], views[0])

    def test_closed_form_fill_rule(self):
        cube = coordinate_cube(9, 9, 4)
        views = extract_tpo(cube, (4, 4), SamplerConfig(patch_size=3))
        assert views[0, 2, 1, 1] == 442.0

    def test_view_equals_shifted_center_view(self):
        rng = np.random.default_rng(8)
        cube = HsiCube(rng.normal(size=(4, 9, 9)).astype(np.float32))
        cfg = SamplerConfig(patch_size=3)
        for r, c in [(3, 3), (4, 5), (2, 4)]:
            views = extract_tpo(cube, (r, c), cfg)
            for v, (dr, dc) in enumerate(CLOCKWISE_OFFSETS, start=1):
                shifted = extract_tpo(cube, (r + dr, c + dc), cfg)
                np.testing.assert_array_equal(views[v], shifted[0])

    def test_matches_oracle_everywhere(self):
        rng = np.random.default_rng(3)
        cube = HsiCube(rng.normal(size=(4, 9, 9)).astype(np.float32))
        for mode in ("mirror", "zero"):
            cfg = SamplerConfig(patch_size=3, border_mode=mode)
            for r in range(9):
                for c in range(9):
                    got = extract_tpo(cube, (r, c), cfg)
                    np.testing.assert_array_equal(got, oracle_extract(cube, (r, c), cfg))

    def test_single_view_is_slice_zero(self):
        rng = np.random.default_rng(5)
        cube = HsiCube(rng.normal(size=(3, 8, 8)).astype(np.float32))
        nine = extract_tpo(cube, (2, 6), SamplerConfig(patch_size=5, views=9))
        one = extract_tpo(cube, (2, 6), SamplerConfig(patch_size=5, views=1))
        assert one.shape == (1, 3, 5, 5)
        np.testing.assert_array_equal(one[0], nine[0])

    def test_target_out_of_bounds(self):
        cube, _ = generate_synthetic_cube(6, 6, 3, 2, seed=0)
        with pytest.raises(IndexError):
            extract_tpo(cube, (6, 0), SamplerConfig(patch_size=3))

    def test_border_pixel_has_a_pure_view(self):
        # straight vertical class boundary: some shifted view of a border
        # pixel must lie entirely in its own class
        h, w, d = 8, 8, 3
        values = np.zeros((d, h, w), dtype=np.float32)
        values[:, :, : w // 2] = 1.0  # left class signature
        cube = HsiCube(values)
        border_target = (4, w // 2 - 1)  # rightmost pixel of the left class
        views = extract_tpo(cube, border_target, SamplerConfig(patch_size=3))
        assert any(np.all(views[v] == 1.0) for v in range(9))
        center_only = views[0]
        assert not np.all(center_only == 1.0)


class TestBuildDataset:
    def test_empty_split(self):
        cube, labels = generate_synthetic_cube(8, 8, 3, 2, seed=0)
        split = make_split(labels, per_class=0, seed=0)
        ds = build_dataset(cube, labels, split, SamplerConfig(patch_size=3), part="train")
        assert len(ds) == 0

    def test_cardinality_and_shape(self):
        cube, labels = generate_synthetic_cube(10, 10, 4, 2, seed=1)
        split = make_split(labels, per_class=6, seed=2)
        ds = build_dataset(cube, labels, split, SamplerConfig(patch_size=3), part="train")
        assert len(ds) == 12
        sample = ds[0]
        assert sample.views.shape == (9, 4, 3, 3)

    def test_labels_match_raster_exhaustively(self):
        cube, labels = generate_synthetic_cube(10, 10, 3, 3, seed=3)
        split = make_split(labels, per_class=5, seed=4)
        ds = build_dataset(cube, labels, split, SamplerConfig(patch_size=3), part="all")
        for sample in ds:
            r, c = sample.origin
            assert sample.label == labels.labels[r, c]

    def test_scene_dataset_covers_every_pixel(self):
        cube, _ = generate_synthetic_cube(5, 4, 3, 2, seed=0)
        ds = scene_dataset(cube, SamplerConfig(patch_size=3))
        assert len(ds) == 20
        assert ds[0].origin == (0, 0)
        assert ds[19].origin == (4, 3)


class TestBatchIter:
    def _dataset(self):
        cube, labels = generate_synthetic_cube(10, 10, 3, 2, seed=0)
        split = make_split(labels, per_class=10, seed=0)
        return build_dataset(cube, labels, split, SamplerConfig(patch_size=3), part="train")

    def test_partition_arithmetic(self):
        ds = self._dataset()
        sizes = [v.shape[0] for v, _ in batch_iter(ds, 8)]
        assert sizes == [8, 8, 4]

    def test_epoch_zero_order_deterministic(self):
        ds = self._dataset()
        a = [tuple(l) for _, l in batch_iter(ds, 4, shuffle_seed=11, epoch=0)]
        b = [tuple(l) for _, l in batch_iter(ds, 4, shuffle_seed=11, epoch=0)]
        assert a == b

    def test_epochs_reshuffle(self):
        ds = self._dataset()
        flat = lambda epoch: [int(x) for _, l in batch_iter(ds, 20, shuffle_seed=1, epoch=epoch) for x in l]
        assert flat(0) != flat(1)

    def test_label_multiset_preserved(self):
        ds = self._dataset()
        want = Counter(s.label for s in ds)
        got = Counter()
        for _, labels in batch_iter(ds, 7, shuffle_seed=5, epoch=3):
            got.update(int(x) for x in labels)
        assert got == want
