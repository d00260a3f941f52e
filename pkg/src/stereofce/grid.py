"""Oriented latent voxel grids around a coarse box, plus coarse-box sources.

A grid divides a box scaled by ``margin`` into ``resl`` cells per axis and
places one voxel at every cell center.  The grid inherits the box yaw, so
the local y axis of the grid is the object's height axis regardless of
orientation, which is what the height-pooling attention in the detector
head relies on.

The default margin of 2.0 is deliberate: coarse boxes come from heavily
perturbed ground truth (several meters of center noise), and a tight grid
would routinely miss the object entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, ParseError
from .geometry import Box3D, box_params, rot_y, wrap_angle

__all__ = [
    "MIN_EXTENT",
    "DEFAULT_MARGIN",
    "LatentGrid",
    "NoiseRanges",
    "CoarseBoxProvider",
    "build_grid",
    "perturb",
    "refine",
]

MIN_EXTENT = 0.1       # meters; extents are clamped here before any use
DEFAULT_MARGIN = 2.0


@dataclass(frozen=True)
class LatentGrid:
    """resl³ voxel centers around ``source``, ordered (ix, iy, iz).

    ``centers[i]`` flattens the index triple row-major with ix slowest and
    iz fastest; iy walks the object's height axis.  ``spacing`` is the
    cell edge length per local axis, ``margin·dim/resl``.
    """

    source: Box3D
    resl: int
    margin: float
    centers: np.ndarray          # [resl³, 3] camera frame
    spacing: np.ndarray          # [3] local cell edge lengths

    @property
    def n_voxels(self) -> int:
        return self.resl ** 3

    def local_coords(self) -> np.ndarray:
        """Centers expressed in the grid's local (unrotated) frame."""
        return (self.centers - self.source.center) @ rot_y(self.source.theta)


def build_grid(b: Box3D, resl: int, margin: float = DEFAULT_MARGIN) -> LatentGrid:
    """Split the margin-scaled box into resl³ cells and take their centers.

    The source extents are clamped to at least 0.1 m first, so degenerate
    coarse boxes still produce a usable grid.
    """
    if not isinstance(resl, (int, np.integer)) or resl < 2:
        raise ConfigError(f"grid resolution must be an integer ≥ 2, got {resl!r}")
    if not margin >= 1.0:
        raise ConfigError(f"grid margin must be ≥ 1, got {margin!r}")
    dims = np.maximum([b.w, b.h, b.l], MIN_EXTENT)
    extent = margin * dims                       # full local edge lengths
    # cell centers along one axis, in units of the full extent
    frac = (np.arange(resl, dtype=np.float64) + 0.5) / resl - 0.5
    ax = frac[:, None] * extent[None, :]         # [resl, 3]
    local = np.zeros((resl, resl, resl, 3), dtype=np.float64)
    local[..., 0] = ax[:, 0][:, None, None]      # ix slowest
    local[..., 1] = ax[:, 1][None, :, None]      # iy = height axis
    local[..., 2] = ax[:, 2][None, None, :]      # iz fastest
    local = local.reshape(-1, 3)
    centers = local @ rot_y(b.theta).T + b.center
    return LatentGrid(source=b, resl=int(resl), margin=float(margin),
                      centers=centers, spacing=extent / resl)


@dataclass(frozen=True)
class NoiseRanges:
    """Half-widths of the uniform coarse-box noise, one per parameter."""

    x: float = 2.0
    y: float = 0.8
    z: float = 3.0
    w: float = 1.5
    h: float = 1.5
    l: float = 1.5
    theta: float = 0.6

    def __post_init__(self):
        for name in ("x", "y", "z", "w", "h", "l", "theta"):
            if not getattr(self, name) > 0:
                raise InputError(f"noise half-range {name} must be positive")

    @staticmethod
    def zero_like(eps: float = 1e-12) -> "NoiseRanges":
        """Effectively noiseless ranges (handy in tests)."""
        return NoiseRanges(eps, eps, eps, eps, eps, eps, eps)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.h, self.l,
                         self.theta], dtype=np.float64)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def perturb(gt: Box3D, ranges: NoiseRanges, seed) -> Box3D:
    """Disturb a ground-truth box with independent uniform noise.

    Draws happen in the canonical parameter order (X, Y, Z, W, H, L,
    theta), so a fixed seed reproduces the same coarse box.  Extents are
    clamped to 0.1 m and the yaw re-wrapped.
    """
    rng = _rng(seed)
    half = ranges.as_array()
    delta = rng.uniform(-half, half)
    return refine(gt, delta)


def refine(b: Box3D, delta) -> Box3D:
    """Apply a 7-vector residual to a box: add, wrap yaw, clamp extents."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (7,):
        raise InputError(f"residual must be a 7-vector, got shape {delta.shape}")
    p = box_params(b) + delta
    return Box3D(p[0], p[1], p[2],
                 max(p[3], MIN_EXTENT), max(p[4], MIN_EXTENT),
                 max(p[5], MIN_EXTENT), wrap_angle(p[6]))


@dataclass(frozen=True)
class CoarseBoxProvider:
    """Source of initial boxes: perturbed ground truth or an external file.

    In ``perturbed-ground-truth`` mode each ground-truth box is disturbed
    with ``ranges``; in ``external-file`` mode boxes are read from
    ``<path>/<scene_id>.txt`` in the standard label format, standing in
    for any upstream coarse detector.
    """

    mode: str = "perturbed-ground-truth"
    path: str | None = None
    ranges: NoiseRanges = field(default_factory=NoiseRanges)

    def __post_init__(self):
        if self.mode not in ("perturbed-ground-truth", "external-file"):
            raise ConfigError(f"unknown coarse box mode {self.mode!r}")
        if self.mode == "external-file" and not self.path:
            raise ConfigError("external-file coarse boxes need a directory path")

    def coarse_boxes(self, scene_id: str, gts: list[Box3D], seed) -> list[Box3D]:
        if self.mode == "perturbed-ground-truth":
            rng = _rng(seed)
            return [perturb(gt, self.ranges, rng) for gt in gts]
        from .dataio.kitti import parse_label_file
        import os
        fname = os.path.join(self.path, f"{scene_id}.txt")
        labels = parse_label_file(fname)
        boxes = [lab.to_box3d() for lab in labels if not lab.is_dontcare]
        for bx in boxes:
            if not isinstance(bx, Box3D):
                raise ParseError(f"{fname}: invalid coarse box")
        return boxes
