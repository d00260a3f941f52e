"""Procedural stereo scenes with exact geometry.

A scene is a textured ground plane, an infinite textured backdrop wall
(so no ray escapes to a featureless sky), and a handful of car-sized
cuboids resting on the ground.  Both eyes ray-cast the same geometry
from horizontally offset centers, which makes the pair rectified by
construction and every ground-truth quantity (depth, disparity, box
corners) analytic.

Textures are checkerboards plus smooth value noise evaluated in
surface-local meters, so corresponding points look identical from both
eyes up to shading, while nearby points differ.  Everything is driven
by integer hashing: a (seed, config) pair fully determines the output
bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import InputError
from ..geometry import (Box3D, CameraEye, CameraRig, corner_transform,
                        project_points, rot_y, wrap_angle)
from .kitti import (KittiCalib, KittiLabel, parse_calib_file, parse_label_file,
                    serialize_labels, write_calib_file)
from .ppm import read_image, write_ppm

__all__ = ["RigConfig", "SyntheticScene", "make_rig", "render_synthetic",
           "save_scene", "load_scene", "scene_name"]


@dataclass(frozen=True)
class RigConfig:
    """Desk-scale stereo rig and staging volume."""

    width: int = 192
    height: int = 128
    focal: float = 230.0
    # wider than a road car's rig on purpose: at staging depth the depth
    # sensitivity is f·b/z² ≈ 3 px/m, enough for features to resolve the
    # sub-metre placement errors the detector is trained to undo
    baseline: float = 1.0
    cam_height: float = 1.65          # ground plane sits this far below the rig
    wall_z: float = 16.0
    z_range: tuple[float, float] = (6.5, 9.5)
    supersample: int = 2              # rays per pixel edge; 1 disables AA

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise InputError("image must be at least 32x32")
        if not (self.focal > 0 and self.baseline > 0 and self.cam_height > 0):
            raise InputError("focal, baseline and camera height must be positive")
        if self.wall_z <= self.z_range[1]:
            raise InputError("backdrop wall must sit behind the staging range")
        if self.supersample < 1:
            raise InputError("supersample factor must be ≥ 1")


def make_rig(cfg: RigConfig = RigConfig()) -> CameraRig:
    """World frame == left eye frame; the right eye sits at +baseline x."""
    common = dict(fx=cfg.focal, fy=cfg.focal, cx=cfg.width / 2.0,
                  cy=cfg.height / 2.0, r=np.eye(3))
    left = CameraEye(t=np.zeros(3), **common)
    right = CameraEye(t=np.array([-cfg.baseline, 0.0, 0.0]), **common)
    return CameraRig(left=left, right=right, baseline=cfg.baseline)


@dataclass(frozen=True)
class SyntheticScene:
    """A rendered pair with its exact ground truth."""

    scene_id: str
    rig: CameraRig
    img_l: np.ndarray               # [3,H,W] in [0,1]
    img_r: np.ndarray
    gt_boxes: tuple[Box3D, ...]
    labels: tuple[KittiLabel, ...]
    depth_l: np.ndarray             # [H,W] meters, analytic
    depth_r: np.ndarray
    seed: int
    config: RigConfig


# ---------------------------------------------------------------------------
# hashing and textures

_C1 = np.uint64(0xBF58476D1CE4E5B9)
_C2 = np.uint64(0x94D049BB133111EB)
_C3 = np.uint64(0x9E3779B97F4A7C15)


def _hash01(seed: int, xi: np.ndarray, yi: np.ndarray) -> np.ndarray:
    """Deterministic lattice hash to [0,1), vectorized, platform-stable."""
    seed_mix = np.uint64((seed * 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF)
    h = (xi.astype(np.int64).view(np.uint64) * _C1
         ^ yi.astype(np.int64).view(np.uint64) * _C2
         ^ seed_mix)
    h ^= h >> np.uint64(30)
    h *= _C1
    h ^= h >> np.uint64(27)
    h *= _C2
    h ^= h >> np.uint64(31)
    return h.astype(np.float64) / float(2 ** 64)


def _value_noise(seed: int, cell: float, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Bilinear lattice noise, smooth below the cell scale."""
    gs, gt = s / cell, t / cell
    i0 = np.floor(gs).astype(np.int64)
    j0 = np.floor(gt).astype(np.int64)
    fs, ft = gs - i0, gt - j0
    fs = fs * fs * (3.0 - 2.0 * fs)
    ft = ft * ft * (3.0 - 2.0 * ft)
    n00 = _hash01(seed, i0, j0)
    n10 = _hash01(seed, i0 + 1, j0)
    n01 = _hash01(seed, i0, j0 + 1)
    n11 = _hash01(seed, i0 + 1, j0 + 1)
    top = n00 + (n10 - n00) * fs
    bot = n01 + (n11 - n01) * fs
    return top + (bot - top) * ft


def _checker(cell: float, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.mod(np.floor(s / cell) + np.floor(t / cell), 2.0)


@dataclass(frozen=True)
class TextureParams:
    """Feature scales of the procedural surfaces, all in meters.

    Noise cells are kept a few pixels wide at staging depth; much finer
    and the two eyes sample the pattern at different aliasing phases,
    which breaks the left/right agreement the pipeline depends on.
    """

    ground_checker: float = 1.0
    ground_noise: float = 0.25
    wall_checker: float = 0.8
    wall_noise: float = 0.30
    box_checker: float = 0.40
    box_noise: float = 0.15
    amp: float = 0.30
    box_amp: float = 0.35


@dataclass(frozen=True)
class _Material:
    seed: int
    color_a: np.ndarray
    color_b: np.ndarray
    checker_cell: float
    noise_cell: float
    noise_amp: float

    def shade(self, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        c = _checker(self.checker_cell, s, t)[..., None]
        base = self.color_a + (self.color_b - self.color_a) * c
        n1 = _value_noise(self.seed, self.noise_cell, s, t)
        n2 = _value_noise(self.seed + 7919, self.noise_cell * 0.41, s, t)
        bump = self.noise_amp * (n1 - 0.5) + 0.6 * self.noise_amp * (n2 - 0.5)
        return np.clip(base + bump[..., None], 0.0, 1.0)


def _palette(rng: np.random.Generator, lo: float, hi: float) -> np.ndarray:
    return rng.uniform(lo, hi, 3)


# light travels along this (unit) direction; fixed for every scene
_LIGHT = np.array([0.30, 0.75, 0.45])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)
_AMBIENT, _DIFFUSE = 0.45, 0.55


def _lambert(normal: np.ndarray) -> float:
    return _AMBIENT + _DIFFUSE * max(0.0, float(-normal @ _LIGHT))


# ---------------------------------------------------------------------------
# ray casting


@dataclass(frozen=True)
class _SceneGeometry:
    cfg: RigConfig
    boxes: tuple[Box3D, ...]
    ground_mat: _Material
    wall_mat: _Material
    box_mats: tuple[tuple[_Material, ...], ...]   # per box: one per local axis


def _render_eye(geo: _SceneGeometry, eye_x: float) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast one eye at world x offset ``eye_x``; returns (img, depth).

    With supersampling, ``ss``² rays per pixel are box-averaged; the
    depth map keeps the center-most subsample so it stays an exact
    geometric depth rather than an average across edges.
    """
    cfg = geo.cfg
    ss = cfg.supersample
    h, w = cfg.height * ss, cfg.width * ss
    # subpixel centers: pixel i covers [i-0.5, i+0.5), sample at i + (k+0.5)/ss - 0.5
    u = (np.arange(w, dtype=np.float64) + 0.5) / ss - 0.5
    v = (np.arange(h, dtype=np.float64) + 0.5) / ss - 0.5
    dx = (u[None, :] - cfg.width / 2.0) / cfg.focal * np.ones((h, 1))
    dy = (v[:, None] - cfg.height / 2.0) / cfg.focal * np.ones((1, w))
    # dz == 1 everywhere, so ray parameter t equals camera depth z

    t_best = np.full((h, w), np.inf)
    color = np.zeros((h, w, 3))

    def commit(t_hit, mask, albedo, normal_shade):
        nonlocal t_best, color
        better = mask & (t_hit < t_best)
        t_best = np.where(better, t_hit, t_best)
        color[better] = (albedo * normal_shade)[better]

    # ground plane y = cam_height, normal points up at the camera
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = np.where(dy > 1e-9, cfg.cam_height / dy, np.inf)
    ok = np.isfinite(tg)
    tg_safe = np.where(ok, tg, 0.0)
    alb = geo.ground_mat.shade(eye_x + tg_safe * dx, tg_safe)
    commit(tg, ok, alb, _lambert(np.array([0.0, -1.0, 0.0])))

    # backdrop wall z = wall_z, facing the camera; catches every leftover ray
    tw = np.full((h, w), cfg.wall_z)
    wx = eye_x + tw * dx
    wy = tw * dy
    alb = geo.wall_mat.shade(wx, wy)
    commit(tw, np.ones((h, w), bool), alb, _lambert(np.array([0.0, 0.0, -1.0])))

    # boxes: slab test in each box's local frame
    origin = np.array([eye_x, 0.0, 0.0])
    for box, mats in zip(geo.boxes, geo.box_mats):
        rot = rot_y(box.theta)
        o_local = rot.T @ (origin - box.center)
        d_world = np.stack([dx, dy, np.ones_like(dx)], axis=-1)
        d_local = d_world @ rot            # == (rot.T @ d) per pixel
        half = np.array([box.w, box.h, box.l]) / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d_local
        t1 = (-half - o_local) * inv
        t2 = (half - o_local) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        near_axis = np.argmax(tmin, axis=-1)
        t_near = np.take_along_axis(tmin, near_axis[..., None], -1)[..., 0]
        t_far = np.min(tmax, axis=-1)
        hit = (t_near <= t_far) & (t_near > 1e-6) & np.isfinite(t_near)

        t_near = np.where(hit, t_near, 1.0)     # keep the off-box arithmetic finite
        p_local = o_local + t_near[..., None] * d_local
        axis = near_axis
        sign = -np.sign(np.take_along_axis(d_local, axis[..., None], -1)[..., 0])
        # face-local coordinates: the two axes that are not the hit axis
        s_axis = np.where(axis == 0, 2, 0)
        t_axis = np.where(axis == 1, 2, 1)
        s_co = np.take_along_axis(p_local, s_axis[..., None], -1)[..., 0]
        t_co = np.take_along_axis(p_local, t_axis[..., None], -1)[..., 0]

        albedo = np.zeros((h, w, 3))
        shade = np.zeros((h, w))
        for ax in range(3):
            m = hit & (axis == ax)
            if not np.any(m):
                continue
            albedo[m] = mats[ax].shade(s_co[m], t_co[m])
            for sg in (-1.0, 1.0):
                ms = m & (sign == sg)
                if not np.any(ms):
                    continue
                n_local = np.zeros(3)
                n_local[ax] = sg
                shade[ms] = _lambert(rot @ n_local)
        better = hit & (t_near < t_best)
        t_best = np.where(better, t_near, t_best)
        color[better] = (albedo * shade[..., None])[better]

    img = color.reshape(cfg.height, ss, cfg.width, ss, 3).mean(axis=(1, 3))
    depth = t_best.reshape(cfg.height, ss, cfg.width, ss)[:, ss // 2, :, ss // 2]
    return img.transpose(2, 0, 1), depth


# ---------------------------------------------------------------------------
# scene assembly


def _sample_box(rng: np.random.Generator, cfg: RigConfig) -> Box3D:
    bw = rng.uniform(1.5, 1.9)
    bh = rng.uniform(1.4, 1.7)
    bl = rng.uniform(3.4, 4.5)
    z = rng.uniform(*cfg.z_range)
    # keep the whole footprint inside the horizontal field of view
    diag = 0.5 * np.hypot(bw, bl)
    x_max = max(0.3, z * (cfg.width / 2.0 - 4.0) / cfg.focal - diag)
    x = rng.uniform(-x_max, x_max)
    y = cfg.cam_height - bh / 2.0      # resting on the ground
    theta = rng.uniform(-np.pi, np.pi)
    return Box3D(x, y, z, bw, bh, bl, theta)


def _project_bbox(box: Box3D, eye: CameraEye, cfg: RigConfig
                  ) -> tuple[float, float, float, float]:
    corners = corner_transform(box)[:, :8].T
    uv, _, _ = project_points(corners, eye)
    return (float(uv[:, 0].min()), float(uv[:, 1].min()),
            float(uv[:, 0].max()), float(uv[:, 1].max()))


def _u_interval(box: Box3D, cfg: RigConfig) -> tuple[float, float]:
    l, t, r, b = _project_bbox(box, make_rig(cfg).left, cfg)
    return l, r


def _make_label(box: Box3D, cfg: RigConfig, occluded: int) -> KittiLabel:
    left, top, right, bottom = _project_bbox(box, make_rig(cfg).left, cfg)
    cl = max(left, 0.0)
    ct = max(top, 0.0)
    cr = min(right, cfg.width - 1.0)
    cb = min(bottom, cfg.height - 1.0)
    full = max(right - left, 1e-9) * max(bottom - top, 1e-9)
    vis = max(cr - cl, 0.0) * max(cb - ct, 0.0)
    trunc = float(np.clip(1.0 - vis / full, 0.0, 1.0))
    alpha = wrap_angle(box.theta - np.arctan2(box.x, box.z))
    return KittiLabel(type="Car", truncated=trunc, occluded=occluded,
                      alpha=float(alpha), bbox=(cl, ct, cr, cb),
                      dimensions=(box.h, box.w, box.l),
                      location=(box.x, box.y + box.h / 2.0, box.z),
                      rotation_y=box.theta)


def scene_name(seed: int) -> str:
    return f"{seed:06d}"


def render_synthetic(seed: int, n_objects: int = 1,
                     cfg: RigConfig = RigConfig(),
                     textures: TextureParams = TextureParams()) -> SyntheticScene:
    """Render one deterministic scene with ``n_objects`` cuboids."""
    if n_objects < 1:
        raise InputError(f"need at least one object, got {n_objects}")
    rng = np.random.default_rng([int(seed), 0xFCE])

    boxes: list[Box3D] = []
    for _ in range(n_objects):
        candidate = None
        for _attempt in range(300):
            candidate = _sample_box(rng, cfg)
            if _make_label(candidate, cfg, 0).truncated > 0.1:
                continue
            iv = _u_interval(candidate, cfg)
            clear = all(iv[1] < o[0] - 2.0 or iv[0] > o[1] + 2.0
                        for o in map(lambda b: _u_interval(b, cfg), boxes))
            if clear:
                break
        boxes.append(candidate)
    # farther boxes first so any residual overlap marks the one behind
    boxes.sort(key=lambda b: -b.z)

    occluded = []
    for i, b in enumerate(boxes):
        iv = _u_interval(b, cfg)
        occ = 0
        for other in boxes[i + 1:]:         # nearer boxes can cover this one
            ov = _u_interval(other, cfg)
            overlap = min(iv[1], ov[1]) - max(iv[0], ov[0])
            if overlap > 0:
                occ = 1 if overlap < 0.5 * (iv[1] - iv[0]) else 2
        occluded.append(occ)

    mat_rng = np.random.default_rng([int(seed), 0xA11])
    tp = textures
    ground = _Material(seed=int(mat_rng.integers(2 ** 31)),
                       color_a=_palette(mat_rng, 0.25, 0.40),
                       color_b=_palette(mat_rng, 0.45, 0.62),
                       checker_cell=tp.ground_checker, noise_cell=tp.ground_noise,
                       noise_amp=tp.amp)
    wall = _Material(seed=int(mat_rng.integers(2 ** 31)),
                     color_a=_palette(mat_rng, 0.30, 0.48),
                     color_b=_palette(mat_rng, 0.52, 0.72),
                     checker_cell=tp.wall_checker, noise_cell=tp.wall_noise,
                     noise_amp=tp.amp)
    box_mats = []
    for _ in boxes:
        per_axis = tuple(
            _Material(seed=int(mat_rng.integers(2 ** 31)),
                      color_a=_palette(mat_rng, 0.20, 0.45),
                      color_b=_palette(mat_rng, 0.50, 0.80),
                      checker_cell=tp.box_checker, noise_cell=tp.box_noise,
                      noise_amp=tp.box_amp)
            for _axis in range(3))
        box_mats.append(per_axis)

    geo = _SceneGeometry(cfg=cfg, boxes=tuple(boxes), ground_mat=ground,
                         wall_mat=wall, box_mats=tuple(box_mats))
    img_l, depth_l = _render_eye(geo, 0.0)
    img_r, depth_r = _render_eye(geo, cfg.baseline)
    labels = tuple(_make_label(b, cfg, occ) for b, occ in zip(boxes, occluded))
    return SyntheticScene(scene_id=scene_name(seed), rig=make_rig(cfg),
                          img_l=img_l, img_r=img_r, gt_boxes=tuple(boxes),
                          labels=labels, depth_l=depth_l, depth_r=depth_r,
                          seed=int(seed), config=cfg)


# ---------------------------------------------------------------------------
# on-disk dataset layout (KITTI-style directory names)


def _calib_for(cfg: RigConfig) -> KittiCalib:
    k = np.array([[cfg.focal, 0.0, cfg.width / 2.0],
                  [0.0, cfg.focal, cfg.height / 2.0],
                  [0.0, 0.0, 1.0]])
    p2 = np.hstack([k, np.zeros((3, 1))])
    t_right = np.array([-cfg.baseline, 0.0, 0.0])
    p3 = np.hstack([k, (k @ t_right)[:, None]])
    return KittiCalib(p2=p2, p3=p3, r0_rect=np.eye(3))


def save_scene(root: str | Path, scene: SyntheticScene) -> None:
    """Write images, labels and calib under KITTI-style subdirectories."""
    root = Path(root)
    for sub in ("image_2", "image_3", "label_2", "calib"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    sid = scene.scene_id
    write_ppm(root / "image_2" / f"{sid}.ppm", scene.img_l)
    write_ppm(root / "image_3" / f"{sid}.ppm", scene.img_r)
    serialize_labels(root / "label_2" / f"{sid}.txt", list(scene.labels))
    write_calib_file(root / "calib" / f"{sid}.txt", _calib_for(scene.config))


@dataclass(frozen=True)
class LoadedScene:
    """A scene read back from disk; enough for training and inference."""

    scene_id: str
    rig: CameraRig
    img_l: np.ndarray
    img_r: np.ndarray
    gt_boxes: tuple[Box3D, ...]
    labels: tuple[KittiLabel, ...]


def load_scene(root: str | Path, scene_id: str) -> LoadedScene:
    root = Path(root)
    img_l = read_image(root / "image_2" / f"{scene_id}.ppm")
    img_r = read_image(root / "image_3" / f"{scene_id}.ppm")
    labels = tuple(parse_label_file(root / "label_2" / f"{scene_id}.txt"))
    calib = parse_calib_file(root / "calib" / f"{scene_id}.txt")
    boxes = tuple(lb.to_box3d() for lb in labels if not lb.is_dontcare)
    return LoadedScene(scene_id=scene_id, rig=calib.to_rig(), img_l=img_l,
                       img_r=img_r, gt_boxes=boxes, labels=labels)
