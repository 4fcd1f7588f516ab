"""Probabilistic dense image registration with a structured Gaussian proposal
and sampled importance resampling."""

from ._kernels import backend_name as kernel_backend
from .grids import (
    DisplacementField,
    Grid,
    Volume,
    field_from_vector,
    jacobian_fold_fraction,
    spatial_forward_diff,
    vectorize_field,
    warp_gradient,
    warp_intensity,
    warp_labels,
)
from .gaussian import (
    CholeskyFactor,
    LowRankFactor,
    NoiseDraw,
    StructuredGaussian,
)
from .pattern import SparsityPattern, build_pattern

__version__ = "0.1.0"

__all__ = [
    "CholeskyFactor",
    "DisplacementField",
    "Grid",
    "LowRankFactor",
    "NoiseDraw",
    "SparsityPattern",
    "StructuredGaussian",
    "Volume",
    "build_pattern",
    "field_from_vector",
    "jacobian_fold_fraction",
    "kernel_backend",
    "spatial_forward_diff",
    "vectorize_field",
    "warp_gradient",
    "warp_intensity",
    "warp_labels",
    "__version__",
]
