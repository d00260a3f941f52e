"""Camera models, oriented 3D boxes, projection, and rotated-box IoU.

Conventions used throughout the package:

* Camera frame: x right, y down, z forward (optical axis).  All distances
  in meters, image coordinates in pixels.
* A :class:`Box3D` stores its GEOMETRIC center.  File formats that anchor
  boxes elsewhere (for example at the bottom face) are converted by their
  parsers, never inside geometry code.
* Yaw ``theta`` rotates about the y axis and is normalised into (−π, π].

Everything here is pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, DimensionError, InputError
from . import tensor as T

__all__ = [
    "Box3D",
    "CameraEye",
    "CameraRig",
    "AffineMap",
    "wrap_angle",
    "rot_y",
    "CORNER_SIGNS",
    "corner_transform",
    "corner_transform_t",
    "box_params",
    "box_from_params",
    "project_points",
    "project_voxel",
    "bev_rect",
    "iou_bev",
    "iou3d",
]

MIN_DEPTH = 1e-6  # camera-frame z at or below this counts as behind the camera


def wrap_angle(theta: float) -> float:
    """Normalise an angle into (−π, π].

    Values already in range are returned unchanged (bit-exact), so
    wrapping is idempotent and a zero residual update leaves a box's yaw
    untouched down to the last bit.
    """
    theta = float(theta)
    if -math.pi < theta <= math.pi:
        return theta
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: geometric center (x,y,z), extents (w,h,l), yaw.

    ``w`` spans the local x axis, ``h`` the local y axis (vertical) and
    ``l`` the local z axis (heading direction).
    """

    x: float
    y: float
    z: float
    w: float
    h: float
    l: float
    theta: float

    def __post_init__(self):
        for name in ("w", "h", "l"):
            v = getattr(self, name)
            if not (v > 0.0) or not math.isfinite(v):
                raise InputError(f"Box3D: extent {name}={v!r} must be positive")
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @property
    def dims(self) -> np.ndarray:
        return np.array([self.w, self.h, self.l], dtype=np.float64)

    @property
    def volume(self) -> float:
        return self.w * self.h * self.l


def box_params(b: Box3D) -> np.ndarray:
    """Box as the 7-vector (X, Y, Z, W, H, L, theta)."""
    return np.array([b.x, b.y, b.z, b.w, b.h, b.l, b.theta], dtype=np.float64)


def box_from_params(p) -> Box3D:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (7,):
        raise DimensionError(f"box parameters must have shape (7,), got {p.shape}")
    return Box3D(*p.tolist())


def rot_y(theta: float) -> np.ndarray:
    """Rotation by ``theta`` about the camera y axis."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s],
                     [0.0, 1.0, 0.0],
                     [-s, 0.0, c]], dtype=np.float64)


# Sign triples (sx, sy, sz) in lexicographic order with −1 before +1.
CORNER_SIGNS = np.array(
    [(sx, sy, sz)
     for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)],
    dtype=np.float64)


def corner_transform(b: Box3D) -> np.ndarray:
    """Map a box to a 3×9 matrix: eight corners then the center.

    Corner j sits at ``R_y(theta) @ (sx·W/2, sy·H/2, sz·L/2) + center``
    with the sign triples of :data:`CORNER_SIGNS` in order.
    """
    local = (CORNER_SIGNS * (b.dims / 2.0)).T          # [3, 8]
    world = rot_y(b.theta) @ local + b.center[:, None]
    return np.concatenate([world, b.center[:, None]], axis=1)


def corner_transform_t(b7: "T.Tensor") -> "T.Tensor":
    """Differentiable twin of :func:`corner_transform`.

    Takes the 7-vector (X,Y,Z,W,H,L,theta) as a tensor and produces the
    3×9 corner matrix with gradients for every parameter.
    """
    if b7.shape != (7,):
        raise DimensionError(f"expected a 7-vector, got shape {b7.shape}")
    signs9 = np.concatenate([CORNER_SIGNS.T, np.zeros((3, 1))], axis=1)  # [3,9]
    half = T.reshape(T.take(b7, [3, 4, 5]) * 0.5, (3, 1))
    local = T.mul(T.Tensor.const(signs9), half)        # [3, 9]
    c = T.cos(T.take(b7, [6]))
    s = T.sin(T.take(b7, [6]))
    lx = T.take(local, [0], axis=0)
    ly = T.take(local, [1], axis=0)
    lz = T.take(local, [2], axis=0)
    wx = c * lx + s * lz + T.take(b7, [0])
    wy = ly + T.take(b7, [1])
    wz = (-s) * lx + c * lz + T.take(b7, [2])
    return T.concat([wx, wy, wz], axis=0)


# ---------------------------------------------------------------------------
# cameras

def _check_rotation(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise DimensionError(f"rotation must be 3×3, got {r.shape}")
    if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
        raise InputError("rotation matrix is not orthonormal")
    if abs(np.linalg.det(r) - 1.0) > 1e-6:
        raise InputError("rotation matrix must have determinant +1")
    return r


@dataclass(frozen=True)
class CameraEye:
    """One pinhole camera: intrinsics (fx, fy, cx, cy) and extrinsics [R|t]."""

    fx: float
    fy: float
    cx: float
    cy: float
    r: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InputError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        object.__setattr__(self, "r", _check_rotation(self.r))
        t = np.asarray(self.t, dtype=np.float64)
        if t.shape != (3,):
            raise DimensionError(f"translation must be a 3-vector, got {t.shape}")
        object.__setattr__(self, "t", t)

    @property
    def k(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]], dtype=np.float64)


@dataclass(frozen=True)
class CameraRig:
    """A stereo pair.  ``baseline`` is the eye separation in meters."""

    left: CameraEye
    right: CameraEye
    baseline: float
    rectified: bool = True

    def __post_init__(self):
        if not self.baseline > 0:
            raise InputError(f"baseline must be positive, got {self.baseline}")
        if self.rectified:
            l, r = self.left, self.right
            if (l.fx, l.fy, l.cx, l.cy) != (r.fx, r.fy, r.cx, r.cy):
                raise InputError("rectified rig requires identical intrinsics")
            if not np.array_equal(l.r, r.r):
                raise InputError("rectified rig requires identical rotations")
            dt = r.t - l.t
            if not np.allclose(dt, [-self.baseline, 0.0, 0.0], atol=1e-9):
                raise InputError(
                    "rectified rig requires t_right - t_left == (-baseline, 0, 0), "
                    f"got {dt}")

    def eyes(self) -> tuple[CameraEye, CameraEye]:
        return self.left, self.right


@dataclass(frozen=True)
class AffineMap:
    """2×3 affine map from original-image pixels to feature coordinates."""

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (2, 3):
            raise DimensionError(f"affine map must be 2×3, got {m.shape}")
        if abs(np.linalg.det(m[:, :2])) < 1e-12:
            raise InputError("affine map has a singular linear part")
        object.__setattr__(self, "m", m)

    @staticmethod
    def identity() -> "AffineMap":
        return AffineMap(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))

    @staticmethod
    def scale_offset(scale: float, offset: float = 0.0) -> "AffineMap":
        """Isotropic ``(u, v) -> (scale·u + offset, scale·v + offset)``."""
        return AffineMap(np.array([[scale, 0.0, offset], [0.0, scale, offset]]))

    def apply(self, uv: np.ndarray) -> np.ndarray:
        """Apply to points of shape [N,2] (or a single (u,v) pair)."""
        pts = np.asarray(uv, dtype=np.float64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        out = pts @ self.m[:, :2].T + self.m[:, 2]
        return out[0] if single else out

    def compose(self, inner: "AffineMap") -> "AffineMap":
        """Map applying ``inner`` first, then this one."""
        a = self.m[:, :2] @ inner.m[:, :2]
        b = self.m[:, :2] @ inner.m[:, 2] + self.m[:, 2]
        return AffineMap(np.concatenate([a, b[:, None]], axis=1))


def project_points(pts: np.ndarray, eye: CameraEye,
                   affine: AffineMap | None = None
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project [N,3] camera-frame points through one eye.

    Returns ``(uv, z_cam, valid)``.  Points at or behind the image plane
    (z_cam ≤ 1e−6) are flagged invalid rather than raising; their
    coordinates are computed against a clamped depth so they stay finite,
    and callers are expected to mask them out.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DimensionError(f"expected [N,3] points, got {pts.shape}")
    cam = pts @ eye.r.T + eye.t
    z = cam[:, 2]
    valid = z > MIN_DEPTH
    zsafe = np.maximum(z, MIN_DEPTH)
    u = eye.fx * cam[:, 0] / zsafe + eye.cx
    v = eye.fy * cam[:, 1] / zsafe + eye.cy
    uv = np.stack([u, v], axis=1)
    if affine is not None:
        uv = affine.apply(uv)
    return uv, z, valid


def project_voxel(g, eye: CameraEye, affine: AffineMap | None = None
                  ) -> tuple[float, float]:
    """Project a single 3-vector; raises if it sits behind the camera."""
    g = np.asarray(g, dtype=np.float64).reshape(1, 3)
    uv, z, valid = project_points(g, eye, affine)
    if not valid[0]:
        raise BehindCameraError(
            f"point {g[0].tolist()} has camera depth {z[0]:.3g} ≤ {MIN_DEPTH}")
    return float(uv[0, 0]), float(uv[0, 1])


# ---------------------------------------------------------------------------
# rotated-rectangle IoU (bird's-eye view) and 3D IoU

def bev_rect(b: Box3D) -> np.ndarray:
    """Footprint of a box on the ground plane: [4,2] (x,z) corners, CCW."""
    half_w, half_l = b.w / 2.0, b.l / 2.0
    local = np.array([[-half_w, -half_l],
                      [half_w, -half_l],
                      [half_w, half_l],
                      [-half_w, half_l]], dtype=np.float64)
    c, s = math.cos(b.theta), math.sin(b.theta)
    rot = np.array([[c, s], [-s, c]], dtype=np.float64)   # (x,z) rows of R_y
    return local @ rot.T + np.array([b.x, b.z])


def _clip_by_edge(poly: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Keep the part of a convex polygon on the left of directed edge a→b."""
    if len(poly) == 0:
        return poly
    edge = b - a
    # signed area of (edge, p - a); ≥ 0 means inside for a CCW clip polygon
    side = edge[0] * (poly[:, 1] - a[1]) - edge[1] * (poly[:, 0] - a[0])
    out = []
    n = len(poly)
    for i in range(n):
        j = (i + 1) % n
        p, q = poly[i], poly[j]
        sp, sq = side[i], side[j]
        if sp >= 0.0:
            out.append(p)
        if (sp > 0.0) != (sq > 0.0) and sp != sq:
            # edge p→q crosses the clip line
            t = sp / (sp - sq)
            out.append(p + t * (q - p))
    return np.array(out) if out else np.empty((0, 2))


def _convex_intersection_area(pa: np.ndarray, pb: np.ndarray) -> float:
    """Area of the intersection of two convex CCW polygons."""
    poly = pa
    n = len(pb)
    for i in range(n):
        poly = _clip_by_edge(poly, pb[i], pb[(i + 1) % n])
        if len(poly) == 0:
            return 0.0
    x, y = poly[:, 0], poly[:, 1]
    area = 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    return float(area)


def iou_bev(a: Box3D, b: Box3D) -> float:
    """IoU of the two boxes' rotated footprints in the ground plane."""
    inter = _convex_intersection_area(bev_rect(a), bev_rect(b))
    if inter < 1e-12:
        return 0.0
    union = a.w * a.l + b.w * b.l - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou3d(a: Box3D, b: Box3D) -> float:
    """Exact rotated 3D IoU: BEV polygon intersection × vertical overlap."""
    y_lo = max(a.y - a.h / 2.0, b.y - b.h / 2.0)
    y_hi = min(a.y + a.h / 2.0, b.y + b.h / 2.0)
    dy = y_hi - y_lo
    if dy <= 0.0:
        return 0.0
    inter_area = _convex_intersection_area(bev_rect(a), bev_rect(b))
    if inter_area < 1e-12:
        return 0.0
    inter = inter_area * dy
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return inter / union
