"""Scikit-learn style front end: fit on a labeled cube, predict per pixel.

``X`` is a hyperspectral cube as an (H, W, D) array (or an HsiCube), ``y``
the (H, W) label raster with 0 marking unlabeled pixels. ``fit`` standardizes
the cube, draws a per-class training split, and trains the selected network;
``predict`` classifies every pixel of a cube with the fit-time band
statistics.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autograd as ag
from .autograd import Tensor
from .data import HsiCube, LabelRaster, compute_band_stats, ensure_same_grid, make_split, normalize
from .errors import DataError, ShapeError
from .models import ModelSpec, TpoCnn
from .sampler import SamplerConfig, build_dataset, scene_dataset
from .training import TrainConfig, predict_scene, train


def check_cube(X, expected_bands=None):
    """Validate and convert X to an HsiCube (accepts H×W×D arrays)."""
    if isinstance(X, HsiCube):
        cube = X
    else:
        arr = np.asarray(X)
        if arr.ndim != 3:
            raise ShapeError(f"X must be a 3-D (H, W, D) cube, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DataError("X contains non-finite values")
        cube = HsiCube.from_array(arr, layout="hwd")
    if expected_bands is not None and cube.bands != expected_bands:
        raise ShapeError(f"cube has {cube.bands} bands, estimator was fit with {expected_bands}")
    return cube


def check_labels(y, cube):
    """Validate and convert y to a LabelRaster matching the cube grid."""
    raster = y if isinstance(y, LabelRaster) else LabelRaster(np.asarray(y))
    ensure_same_grid(cube, raster)
    if not raster.class_ids():
        raise DataError("y contains no labeled pixels")
    return raster


class TpoCnnClassifier(BaseEstimator, ClassifierMixin):
    """Pixel classifier built on shifted-view sampling and multi-scale CNNs.

    Parameters
    ----------
    variant : "tpo_cnn1" or "tpo_cnn2"
        Which multi-scale feature extractor to use.
    patch_size : odd int
        Spatial window size k.
    p, q, r : int
        Spectral kernel sizes of the three band-reduction stages.
    views : 1 or 9
        9 uses the full shifted-view stack, 1 only the centered window.
    branch_channels : int
        Output channels of every multi-scale branch.
    per_class : int
        Training pixels drawn per class (the rest become the holdout used
        for the fitted `report_`).
    epochs, batch_size, learning_rate, weight_decay : training loop knobs.
    border_mode : "mirror" or "zero" window padding at scene edges.
    seed : int
        Drives the split, initialization, and batch shuffling.
    """

    def __init__(self, variant="tpo_cnn2", patch_size=5, p=8, q=16, r=32,
                 views=9, branch_channels=32, per_class=200, epochs=200,
                 batch_size=512, learning_rate=1e-4, weight_decay=1e-4,
                 border_mode="mirror", early_stop=False, seed=0):
        self.variant = variant
        self.patch_size = patch_size
        self.p = p
        self.q = q
        self.r = r
        self.views = views
        self.branch_channels = branch_channels
        self.per_class = per_class
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.border_mode = border_mode
        self.early_stop = early_stop
        self.seed = seed

    def _sampler_config(self):
        return SamplerConfig(patch_size=self.patch_size, border_mode=self.border_mode,
                             views=self.views)

    def fit(self, X, y):
        cube = check_cube(X)
        labels = check_labels(y, cube)
        class_ids = labels.class_ids()
        if class_ids != list(range(1, len(class_ids) + 1)):
            raise DataError(f"class ids must be contiguous 1..C, got {class_ids}")

        self.stats_ = compute_band_stats(cube)
        normed = normalize(cube, self.stats_)
        split = make_split(labels, self.per_class, self.seed)
        cfg = self._sampler_config()
        train_ds = build_dataset(normed, labels, split, cfg, part="train")
        test_ds = build_dataset(normed, labels, split, cfg, part="test")

        spec = ModelSpec(variant=self.variant, p=self.p, q=self.q, r=self.r,
                         input_bands=cube.bands, patch_size=self.patch_size,
                         class_count=len(class_ids), views=self.views,
                         branch_channels=self.branch_channels)
        model = TpoCnn(spec)
        model.init_params(self.seed)
        tc = TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                         learning_rate=self.learning_rate, weight_decay=self.weight_decay,
                         seed=self.seed, early_stop=self.early_stop)
        self.report_ = train(model, train_ds, tc, eval_dataset=test_ds)
        self.model_ = model
        self.split_ = split
        self.classes_ = np.arange(1, len(class_ids) + 1)
        self.n_bands_ = cube.bands
        self.loss_curve_ = list(self.report_.loss_trace)
        return self

    def _check_is_fitted(self):
        if not hasattr(self, "model_"):
            raise DataError("estimator is not fitted; call fit first")

    def predict(self, X):
        """Class id per pixel as an (H, W) array."""
        self._check_is_fitted()
        cube = check_cube(X, expected_bands=self.n_bands_)
        normed = normalize(cube, self.stats_)
        return predict_scene(self.model_, normed, self._sampler_config(),
                             batch_size=self.batch_size)

    def predict_proba(self, X):
        """Class probabilities per pixel as an (H, W, C) array."""
        self._check_is_fitted()
        cube = check_cube(X, expected_bands=self.n_bands_)
        normed = normalize(cube, self.stats_)
        dataset = scene_dataset(normed, self._sampler_config())
        self.model_.eval_mode()
        rows = []
        with ag.no_grad():
            for start in range(0, len(dataset), self.batch_size):
                stop = min(start + self.batch_size, len(dataset))
                views = np.stack([dataset[i].views for i in range(start, stop)])
                probs = self.model_.forward(Tensor(views.astype(self.model_.dtype, copy=False)))
                rows.append(probs.data)
        stacked = np.concatenate(rows, axis=0)
        return stacked.reshape(cube.height, cube.width, len(self.classes_))

    def score(self, X, y):
        """Overall accuracy (fraction) on the labeled pixels of y."""
        self._check_is_fitted()
        cube = check_cube(X, expected_bands=self.n_bands_)
        raster = check_labels(y, cube)
        pred = self.predict(X)
        mask = raster.labels > 0
        return float(np.mean(pred[mask] == raster.labels[mask]))
