"""Target-pixel-orientation sampling: nine shifted views per target pixel.

For a target pixel, view 0 is the k×k window centered on it; views 1..8 are
the windows re-centered one pixel away in the eight directions enumerated
clockwise from the top-left shift. Border reads resolve through padding with
margin k//2 + 1 (mirror by default). The stacked sample is V×D×k×k with the
view axis outermost, then bands, then the window rows and columns.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import HsiCube
from .errors import DataError, ShapeError

# unit shifts of the window center, clockwise starting at the top-left shift
CLOCKWISE_OFFSETS = (
    (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1),
)


@dataclass(frozen=True)
class SamplerConfig:
    patch_size: int = 5
    border_mode: str = "mirror"
    views: int = 9

    def __post_init__(self):
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise DataError(f"patch_size must be odd and >= 3, got {self.patch_size}")
        if self.border_mode not in ("mirror", "zero"):
            raise DataError(f"border_mode must be 'mirror' or 'zero', got {self.border_mode!r}")
        if self.views not in (1, 9):
            raise DataError(f"views must be 1 or 9, got {self.views}")

    @property
    def margin(self):
        return self.patch_size // 2 + 1


@dataclass(frozen=True)
class TpoSample:
    views: np.ndarray  # V×D×k×k float32
    label: int
    origin: tuple


def pad_cube(cube, margin, mode="mirror"):
    """Grow the spatial grid by `margin` on every side; bands unchanged.

    Mirror padding reflects without repeating the edge pixel, so it needs
    margin < min(H, W).
    """
    if margin < 0:
        raise DataError("margin must be >= 0")
    if margin == 0:
        return cube
    if mode == "mirror":
        if margin >= min(cube.height, cube.width):
            raise DataError(
                f"mirror padding needs margin < min(H, W) = {min(cube.height, cube.width)}, got {margin}"
            )
        padded = np.pad(cube.values, ((0, 0), (margin, margin), (margin, margin)), mode="reflect")
    elif mode == "zero":
        padded = np.pad(cube.values, ((0, 0), (margin, margin), (margin, margin)))
    else:
        raise DataError(f"unknown border mode {mode!r}")
    return HsiCube(padded)


def _views_from_padded(padded_values, target, cfg):
    k = cfg.patch_size
    m = cfg.margin
    r, c = target
    windows = sliding_window_view(padded_values, (k, k), axis=(1, 2))
    base_r = r + m - k // 2
    base_c = c + m - k // 2
    offsets = ((0, 0),) + (CLOCKWISE_OFFSETS if cfg.views == 9 else ())
    stack = np.empty((len(offsets),) + windows.shape[0:1] + (k, k), dtype=padded_values.dtype)
    for v, (dr, dc) in enumerate(offsets):
        stack[v] = windows[:, base_r + dr, base_c + dc]
    return stack


def extract_tpo(cube, target, cfg):
    """Return the V×D×k×k view stack for one target pixel.

    The cube is expected to be normalized already; the target must lie within
    the original (unpadded) bounds.
    """
    r, c = target
    if not (0 <= r < cube.height and 0 <= c < cube.width):
        raise IndexError(f"target {target} outside {cube.height}x{cube.width} grid")
    padded = pad_cube(cube, cfg.margin, cfg.border_mode)
    return _views_from_padded(padded.values, target, cfg)


class TpoDataset:
    """Lazy sequence of TpoSample over a fixed pixel list.

    The padded cube is materialized once; individual samples are cut out on
    demand so memory stays bounded by one batch of view stacks.
    """

    def __init__(self, cube, pixels, cfg):
        self.cfg = cfg
        self.pixels = tuple((int(r), int(c), int(k)) for r, c, k in pixels)
        for r, c, _ in self.pixels:
            if not (0 <= r < cube.height and 0 <= c < cube.width):
                raise IndexError(f"pixel ({r}, {c}) outside {cube.height}x{cube.width} grid")
        self._padded = pad_cube(cube, cfg.margin, cfg.border_mode).values
        self.bands = cube.bands

    @property
    def sample_shape(self):
        k = self.cfg.patch_size
        return (self.cfg.views, self.bands, k, k)

    def __len__(self):
        return len(self.pixels)

    def __getitem__(self, index):
        r, c, label = self.pixels[index]
        views = _views_from_padded(self._padded, (r, c), self.cfg)
        return TpoSample(views=views, label=label, origin=(r, c))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def build_dataset(cube, labels, split, cfg, part="all"):
    """One TpoSample per split pixel, labels copied from the raster.

    Iteration order follows the split (train pixels first for part="all").
    """
    if part == "train":
        pixels = split.train_pixels
    elif part == "test":
        pixels = split.test_pixels
    elif part == "all":
        pixels = split.train_pixels + split.test_pixels
    else:
        raise DataError(f"part must be train, test, or all, got {part!r}")
    lab = labels.labels
    for r, c, k in pixels:
        if lab[r, c] != k:
            raise DataError(f"split lists class {k} at ({r}, {c}) but raster says {lab[r, c]}")
    return TpoDataset(cube, pixels, cfg)


def scene_dataset(cube, cfg):
    """Every pixel of the scene as an unlabeled sample, row-major order."""
    pixels = [(r, c, 0) for r in range(cube.height) for c in range(cube.width)]
    return TpoDataset(cube, pixels, cfg)


def batch_iter(samples, batch_size, shuffle_seed=None, epoch=0):
    """Yield (views B×V×D×k×k, labels B) batches; the last may be smaller.

    When `shuffle_seed` is given, the order is a fresh seeded permutation per
    epoch, drawn from a per-epoch sub-seed and computed up front.
    """
    if batch_size < 1:
        raise ShapeError("batch_size must be >= 1")
    n = len(samples)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        rng = np.random.default_rng(np.random.SeedSequence(shuffle_seed, spawn_key=(epoch,)))
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        chunk = order[start:start + batch_size]
        items = [samples[int(i)] for i in chunk]
        views = np.stack([s.views for s in items])
        labels = np.array([s.label for s in items], dtype=np.int64)
        yield views, labels
