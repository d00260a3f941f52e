"""Stereo 3D object detection with feature-consistency embedding volumes.

The package builds, on top of a small reverse-mode autodiff core, the full
refinement pipeline: siamese multi-scale feature extraction from a rectified
stereo pair, an oriented latent grid around a coarse 3D box, a consistency
volume sampled from both eyes, and a point-network head that regresses a
box correction plus a confidence score.
"""

from .errors import (
    StereoFceError,
    DimensionError,
    InputError,
    ConfigError,
    ParseError,
    VersionError,
    BehindCameraError,
)
from .tensor import (
    Tensor,
    Tape,
    Parameter,
    ParamStore,
    add,
    sub,
    mul,
    div,
    neg,
    exp,
    log,
    sqrt,
    square,
    sigmoid,
    softplus,
    relu,
    sin,
    cos,
    linear,
    conv2d,
    grid_sample_bilinear,
    reduce_mean,
    reduce_sum,
    reduce_max,
    reshape,
    transpose,
    concat,
    take,
    gradcheck,
)

__version__ = "0.1.0"
