"""Hyperspectral cube data model, normalization, splits, and file formats.

Binary formats
--------------
Cube file "HSC1": bytes 0-3 magic ``HSC1``; three little-endian u32 (height,
width, bands); then H*W*D little-endian float32, band-sequential (band index
slowest, then row, then column).

Label file "HSL1": magic ``HSL1``; u32 height, width; then H*W little-endian
u16 class ids row-major (0 = unlabeled).

Split files are UTF-8 text, one pixel per line, ``row,col,class,part`` with
part in {train, test}; lines starting with '#' are comments. Descriptor files
are ``key = value`` text with keys name, class_names, discarded_bands,
min_class_size.

All types are immutable after construction and safe to share across threads.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, FormatError, LengthError, ShapeError, SplitError

HSC_MAGIC = b"HSC1"
HSL_MAGIC = b"HSL1"


def _frozen_array(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class HsiCube:
    """H×W raster with D spectral bands, stored band-major as (D, H, W)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 3:
            raise ShapeError(f"cube values must be 3-D (bands, height, width), got {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"cube dimensions must all be >= 1, got {arr.shape}")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise DataError("cube contains non-finite values")
        object.__setattr__(self, "values", _frozen_array(arr))

    @property
    def bands(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]

    @classmethod
    def from_array(cls, arr, layout="dhw"):
        """Build a cube from an array in (D,H,W) or (H,W,D) layout."""
        arr = np.asarray(arr)
        if layout == "hwd":
            arr = np.moveaxis(arr, -1, 0)
        elif layout != "dhw":
            raise ValueError(f"unknown layout {layout!r}")
        return cls(arr)


@dataclass(frozen=True)
class LabelRaster:
    """Per-pixel class ids matching a cube's spatial grid; 0 = unlabeled."""

    labels: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.ndim != 2:
            raise ShapeError(f"label raster must be 2-D, got {arr.shape}")
        if np.any(arr < 0) or np.any(arr > np.iinfo(np.uint16).max):
            raise DataError("labels must fit in u16 and be >= 0")
        object.__setattr__(self, "labels", _frozen_array(arr.astype(np.uint16)))

    @property
    def height(self):
        return self.labels.shape[0]

    @property
    def width(self):
        return self.labels.shape[1]

    def class_ids(self):
        """Distinct nonzero class ids in ascending order."""
        ids = np.unique(self.labels)
        return [int(c) for c in ids if c != 0]


@dataclass(frozen=True)
class DatasetDescriptor:
    name: str
    class_names: tuple = ()
    discarded_bands: tuple = ()
    min_class_size: int = 0

    def __post_init__(self):
        bands = tuple(int(b) for b in self.discarded_bands)
        if len(set(bands)) != len(bands):
            raise DataError("discarded_bands must be unique")
        if any(b < 0 for b in bands):
            raise DataError("discarded_bands must be >= 0")
        if self.min_class_size < 0:
            raise DataError("min_class_size must be >= 0")
        object.__setattr__(self, "discarded_bands", bands)
        object.__setattr__(self, "class_names", tuple(self.class_names))


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/test pixel lists, each entry (row, col, class)."""

    train_pixels: tuple
    test_pixels: tuple
    per_class_count: int
    rng_seed: int

    def __post_init__(self):
        train = tuple((int(r), int(c), int(k)) for r, c, k in self.train_pixels)
        test = tuple((int(r), int(c), int(k)) for r, c, k in self.test_pixels)
        if any(k == 0 for _, _, k in train + test):
            raise SplitError("split contains an unlabeled pixel")
        overlap = {(r, c) for r, c, _ in train} & {(r, c) for r, c, _ in test}
        if overlap:
            raise SplitError(f"train and test overlap at {sorted(overlap)[:3]}")
        object.__setattr__(self, "train_pixels", train)
        object.__setattr__(self, "test_pixels", test)


@dataclass(frozen=True)
class BandStats:
    """Per-band mean and population standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64)
        s = np.asarray(self.std, dtype=np.float64)
        if m.shape != s.shape or m.ndim != 1:
            raise ShapeError(f"band stats must be matching 1-D vectors, got {m.shape} and {s.shape}")
        if np.any(s < 0):
            raise DataError("standard deviations must be >= 0")
        object.__setattr__(self, "mean", _frozen_array(m))
        object.__setattr__(self, "std", _frozen_array(s))

    @property
    def bands(self):
        return self.mean.shape[0]


def ensure_same_grid(cube, labels):
    if (cube.height, cube.width) != (labels.height, labels.width):
        raise ShapeError(
            f"cube grid {cube.height}x{cube.width} != label grid {labels.height}x{labels.width}"
        )


# ---------------------------------------------------------------------------
# binary file IO
# ---------------------------------------------------------------------------

def save_cube(path, cube):
    with open(path, "wb") as fh:
        fh.write(HSC_MAGIC)
        fh.write(struct.pack("<III", cube.height, cube.width, cube.bands))
        fh.write(np.ascontiguousarray(cube.values, dtype="<f4").tobytes())


def load_cube(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != HSC_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {HSC_MAGIC!r}")
    if len(blob) < 16:
        raise LengthError(f"{path}: truncated header")
    h, w, d = struct.unpack("<III", blob[4:16])
    expected = 16 + 4 * h * w * d
    if len(blob) != expected:
        raise LengthError(f"{path}: payload is {len(blob) - 16} bytes, expected {expected - 16}")
    values = np.frombuffer(blob, dtype="<f4", offset=16).reshape(d, h, w)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite value in payload")
    return HsiCube(values.astype(np.float32))


def save_labels(path, raster):
    with open(path, "wb") as fh:
        fh.write(HSL_MAGIC)
        fh.write(struct.pack("<II", raster.height, raster.width))
        fh.write(np.ascontiguousarray(raster.labels, dtype="<u2").tobytes())


def load_labels(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != HSL_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {HSL_MAGIC!r}")
    if len(blob) < 12:
        raise LengthError(f"{path}: truncated header")
    h, w = struct.unpack("<II", blob[4:12])
    expected = 12 + 2 * h * w
    if len(blob) != expected:
        raise LengthError(f"{path}: payload is {len(blob) - 12} bytes, expected {expected - 12}")
    labels = np.frombuffer(blob, dtype="<u2", offset=12).reshape(h, w)
    return LabelRaster(labels.astype(np.uint16))


def save_split(path, split):
    lines = ["# row,col,class,part"]
    for r, c, k in split.train_pixels:
        lines.append(f"{r},{c},{k},train")
    for r, c, k in split.test_pixels:
        lines.append(f"{r},{c},{k},test")
    lines.append(f"# per_class={split.per_class_count} seed={split.rng_seed}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_split(path, per_class_count=0, rng_seed=0):
    train, test = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 'row,col,class,part'")
            r, c, k, part = parts
            pixel = (int(r), int(c), int(k))
            if part == "train":
                train.append(pixel)
            elif part == "test":
                test.append(pixel)
            else:
                raise FormatError(f"{path}:{lineno}: part must be train or test, got {part!r}")
    return SplitSpec(tuple(train), tuple(test), per_class_count, rng_seed)


def save_descriptor(path, desc):
    lines = [
        f"name = {desc.name}",
        f"class_names = {','.join(desc.class_names)}",
        f"discarded_bands = {','.join(str(b) for b in desc.discarded_bands)}",
        f"min_class_size = {desc.min_class_size}",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_descriptor(path):
    fields = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            fields[key.strip()] = value.strip()
    if "name" not in fields:
        raise FormatError(f"{path}: descriptor needs a name")

    def _csv(text):
        return tuple(t.strip() for t in text.split(",") if t.strip()) if text else ()

    return DatasetDescriptor(
        name=fields["name"],
        class_names=_csv(fields.get("class_names", "")),
        discarded_bands=tuple(int(b) for b in _csv(fields.get("discarded_bands", ""))),
        min_class_size=int(fields.get("min_class_size", "0")),
    )


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def compute_band_stats(cube):
    """Per-band mean and population standard deviation over all pixels."""
    flat = cube.values.reshape(cube.bands, -1).astype(np.float64)
    return BandStats(flat.mean(axis=1), flat.std(axis=1))


def normalize(cube, stats):
    """Standardize each band to zero mean and unit variance.

    Bands with zero spread map to all-zeros rather than dividing by zero.
    """
    if stats.bands != cube.bands:
        raise ShapeError(f"stats cover {stats.bands} bands, cube has {cube.bands}")
    values = cube.values.astype(np.float64)
    centered = values - stats.mean[:, None, None]
    safe_std = np.where(stats.std > 0, stats.std, 1.0)
    normed = centered / safe_std[:, None, None]
    normed[stats.std == 0] = 0.0
    return HsiCube(normed.astype(np.float32))


# ---------------------------------------------------------------------------
# descriptors and splits
# ---------------------------------------------------------------------------

def apply_descriptor(cube, labels, desc):
    """Drop discarded bands and reject classes below the size threshold.

    Surviving class ids are compacted to 1..C' preserving ascending order.
    """
    ensure_same_grid(cube, labels)
    if desc.discarded_bands and max(desc.discarded_bands) >= cube.bands:
        raise DataError(
            f"descriptor discards band {max(desc.discarded_bands)}, cube has {cube.bands}"
        )
    keep = [j for j in range(cube.bands) if j not in set(desc.discarded_bands)]
    new_cube = HsiCube(cube.values[keep]) if len(keep) != cube.bands else cube

    lab = labels.labels
    counts = np.bincount(lab.reshape(-1))
    mapping = np.zeros(counts.shape[0], dtype=np.uint16)
    next_id = 1
    for cls in range(1, counts.shape[0]):
        if counts[cls] >= desc.min_class_size and counts[cls] > 0:
            mapping[cls] = next_id
            next_id += 1
    new_labels = LabelRaster(mapping[lab])
    return new_cube, new_labels


def make_split(labels, per_class, seed, class_count=None):
    """Pick min(per_class, available) training pixels per class, rest to test.

    Deterministic in (labels, per_class, seed). Classes are visited in
    ascending id order and pixels in row-major order before shuffling.
    """
    lab = labels.labels
    present = labels.class_ids()
    classes = list(range(1, class_count + 1)) if class_count else present
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in classes:
        rows, cols = np.nonzero(lab == cls)
        if rows.size == 0:
            raise SplitError(f"class {cls} has no labeled pixels")
        order = rng.permutation(rows.size)
        n_train = min(per_class, rows.size)
        chosen = set(order[:n_train].tolist())
        for i in range(rows.size):
            pixel = (int(rows[i]), int(cols[i]), cls)
            (train if i in chosen else test).append(pixel)
    return SplitSpec(tuple(train), tuple(test), per_class, seed)


# ---------------------------------------------------------------------------
# synthetic fixtures
# ---------------------------------------------------------------------------

def generate_synthetic_cube(h, w, d, classes, seed, noise=0.05, stripe_width=None):
    """Deterministic cube of class-specific spectral signatures plus noise.

    Classes occupy contiguous vertical blocks; pass a small `stripe_width`
    to cycle classes in thin stripes and make the scene boundary-heavy.
    With noise=0 every pixel equals its class signature exactly.
    """
    if classes < 2:
        raise DataError("need at least 2 classes")
    if d < 2:
        raise DataError("need at least 2 bands")
    rng = np.random.default_rng(seed)
    signatures = rng.normal(0.0, 1.0, size=(classes, d))

    cols = np.arange(w)
    if stripe_width is None:
        block = max(1, w // classes)
        label_of_col = np.minimum(cols // block, classes - 1) + 1
    else:
        label_of_col = (cols // int(stripe_width)) % classes + 1
    labels = np.broadcast_to(label_of_col[None, :], (h, w)).astype(np.uint16)

    values = signatures[labels - 1].transpose(2, 0, 1).copy()
    if noise:
        values += noise * rng.normal(size=(d, h, w))
    return HsiCube(values.astype(np.float32)), LabelRaster(labels)
