"""Hyperspectral image classification with target-pixel-orientation sampling.

The package bundles a small reverse-mode autodiff engine, the multi-scale
CNN variants built on it, cube/label file formats, training and evaluation
machinery, an sklearn-style estimator, and the `tpo` command line tool.
"""

__version__ = "0.1.0"

from . import autograd, data, sampler, layers, models, training  # noqa: F401
from .estimator import TpoCnnClassifier  # noqa: F401
