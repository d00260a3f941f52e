"""Feature-consistency embedding volumes.

For every voxel of a latent grid, both eyes' texture pyramids are sampled
at the voxel's projection (through the exact per-scale pixel maps) and
concatenated; a consistency function then scores how well the two eyes
agree at that point in space.  Voxels on a real surface sample the same
physical texture in both eyes and agree; voxels in free space sample
unrelated texture and disagree.  The default consistency function is a
per-channel RBF, exp(−α·diff²), whose sharpness α comes from the
stride-32 semantic feature, so the network can soften channels it has
learned to distrust.

Two code paths build the same volume:

* :func:`build_fce` uses tape ops and is differentiable end to end.
* :func:`build_fce_fast` is inference-only numpy that shares the tape
  path's kernels and can shard voxels across a thread pool.  Sharding
  is safe because every voxel's value is computed independently.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .features import MultiScaleFeatures, TEXTURE_STRIDES, SEMANTIC_STRIDE
from .geometry import CameraRig, project_points
from .grid import LatentGrid
from . import tensor as T
from .tensor import ParamStore, Tensor, _bilinear_value_flat, _softplus_kernel

# RBF exponents are clamped here so exp never underflows to an exact zero
# and the (0, 1] range of valid voxels holds down to the last bit.
RBF_EXP_CAP = 700.0

# fast-path shard size in voxels; small enough that one shard's working
# set stays cache-resident, large enough to amortise per-call overhead
SHARD_VOXELS = 1000

__all__ = [
    "KIND_FAMILY",
    "ConsistencyFn",
    "FCEVolume",
    "warp_features",
    "semantic_alpha",
    "consistency",
    "build_fce",
    "build_fce_fast",
]

KIND_FAMILY = {
    "rbf": "channel-keeping",
    "absolute-difference": "channel-keeping",
    "concat-mlp": "channel-keeping",
    "cosine": "channel-reducing",
    "gaussian": "channel-reducing",
    "rbf-mlp": "channel-reducing",
}


@dataclass(frozen=True)
class ConsistencyFn:
    """One row of the consistency-function ablation table."""

    kind: str = "rbf"
    family: str = ""

    def __post_init__(self):
        if self.kind not in KIND_FAMILY:
            raise ConfigError(
                f"unknown consistency kind {self.kind!r}; "
                f"choose from {sorted(KIND_FAMILY)}")
        expected = KIND_FAMILY[self.kind]
        fam = self.family or expected
        if fam != expected:
            raise ConfigError(
                f"consistency kind {self.kind!r} is {expected}, not {fam!r}")
        object.__setattr__(self, "family", fam)

    @property
    def needs_alpha(self) -> bool:
        return self.kind in ("rbf", "rbf-mlp")

    @property
    def learned(self) -> bool:
        return self.kind in ("concat-mlp", "rbf-mlp")

    def out_channels(self, c_total: int) -> int:
        return c_total if self.family == "channel-keeping" else 1

    def create_params(self, store: ParamStore, c_total: int,
                      seed: int = 0, prefix: str = "cons.") -> None:
        """Register the learned map's weights, if this kind has one."""
        rng = np.random.default_rng(seed)

        def lin(name, c_in, c_out, final=False):
            std = np.sqrt((1.0 if final else 2.0) / c_in)
            store.add(f"{prefix}{name}.w", rng.normal(0.0, std, (c_in, c_out)))
            store.add(f"{prefix}{name}.b",
                      np.zeros(c_out) if final else np.full(c_out, 0.02))

        if self.kind == "concat-mlp":
            lin("l0", 2 * c_total, c_total)
            lin("l1", c_total, c_total, final=True)
        elif self.kind == "rbf-mlp":
            hidden = max(4, c_total // 2)
            lin("l0", c_total, hidden)
            lin("l1", hidden, 1, final=True)


@dataclass(frozen=True)
class FCEVolume:
    """values: Tensor[C_out, resl, resl, resl]; valid: bool[resl³].

    Invalid voxels (behind a camera or projecting fully outside an image
    in either eye) carry exactly zero in every channel.
    """

    values: Tensor
    valid: np.ndarray
    grid: LatentGrid


def _validity(uv: np.ndarray, z: np.ndarray, hw: tuple) -> np.ndarray:
    """In front of the camera and inside the image area (pixel extents)."""
    h, w = hw
    return ((z > 1e-6)
            & (uv[:, 0] >= -0.5) & (uv[:, 0] <= w - 0.5)
            & (uv[:, 1] >= -0.5) & (uv[:, 1] <= h - 0.5))


def _project_eye(centers: np.ndarray, eye, feats: MultiScaleFeatures):
    """Original-pixel projection once, then per-scale affine coordinates."""
    uv, z, _ = project_points(centers, eye)
    valid = _validity(uv, z, feats.image_hw)
    coords = {s: feats.affines[s].apply(uv)
              for s in (*TEXTURE_STRIDES, SEMANTIC_STRIDE)}
    return coords, valid


def _warp_with(coords_l: dict, coords_r: dict, valid: np.ndarray,
               feats_l: MultiScaleFeatures, feats_r: MultiScaleFeatures,
               ) -> tuple[Tensor, Tensor]:
    mask = Tensor.const(valid.astype(np.float64)[:, None])
    fl = T.mul(T.concat([T.grid_sample_bilinear(feats_l[s], coords_l[s])
                         for s in TEXTURE_STRIDES], axis=1), mask)
    fr = T.mul(T.concat([T.grid_sample_bilinear(feats_r[s], coords_r[s])
                         for s in TEXTURE_STRIDES], axis=1), mask)
    return fl, fr


def _alpha_with(coords_l: dict, coords_r: dict,
                feats_l: MultiScaleFeatures, feats_r: MultiScaleFeatures) -> Tensor:
    sl = T.grid_sample_bilinear(feats_l[SEMANTIC_STRIDE], coords_l[SEMANTIC_STRIDE])
    sr = T.grid_sample_bilinear(feats_r[SEMANTIC_STRIDE], coords_r[SEMANTIC_STRIDE])
    return T.softplus(T.mul(T.add(sl, sr), 0.5))


def warp_features(grid: LatentGrid, feats_l: MultiScaleFeatures,
                  feats_r: MultiScaleFeatures, rig: CameraRig,
                  ) -> tuple[Tensor, Tensor, np.ndarray]:
    """Sample both texture pyramids at every voxel.

    Returns (F̂_L, F̂_R) of shape [resl³, C_total] (channel order: all of
    stride 2, then 4, then 8) and the joint validity mask.  Invalid
    voxels are zeroed in both outputs.
    """
    coords_l, valid_l = _project_eye(grid.centers, rig.left, feats_l)
    coords_r, valid_r = _project_eye(grid.centers, rig.right, feats_r)
    valid = valid_l & valid_r
    fl, fr = _warp_with(coords_l, coords_r, valid, feats_l, feats_r)
    return fl, fr, valid


def semantic_alpha(grid: LatentGrid, feats_l: MultiScaleFeatures,
                   feats_r: MultiScaleFeatures, rig: CameraRig) -> Tensor:
    """Per-voxel RBF sharpness from the stride-32 semantic features.

    α = softplus(½(F̂_l^32 + F̂_r^32)), shape [resl³, C_32].  The
    channel-sum constraint on the feature net makes C_32 equal the
    concatenated texture width, so α aligns channel-wise with the
    texture difference.
    """
    coords_l, _ = _project_eye(grid.centers, rig.left, feats_l)
    coords_r, _ = _project_eye(grid.centers, rig.right, feats_r)
    return _alpha_with(coords_l, coords_r, feats_l, feats_r)


def _mlp_tensors(params: ParamStore, prefix: str, tape):
    def get(name):
        p = params[f"{prefix}{name}"]
        return tape.param(p) if tape is not None else Tensor.const(p.value)
    return get


def consistency(fl: Tensor, fr: Tensor, alpha: Tensor | None,
                fn: ConsistencyFn, params: ParamStore | None = None,
                tape=None, prefix: str = "cons.") -> Tensor:
    """Score left/right agreement per voxel.  Output [C_out, resl³]."""
    if fl.shape != fr.shape:
        raise DimensionError(
            f"feature shapes disagree: {fl.shape} vs {fr.shape}")
    if fn.needs_alpha and alpha is None:
        raise ConfigError(f"consistency kind {fn.kind!r} requires alpha")
    if fn.learned and params is None:
        raise ConfigError(f"consistency kind {fn.kind!r} requires parameters")
    if fn.kind == "rbf":
        out = T.rbf_response(alpha, fl, fr, RBF_EXP_CAP)
    elif fn.kind == "absolute-difference":
        diff = T.sub(fl, fr)
        out = T.add(T.relu(diff), T.relu(T.neg(diff)))
    elif fn.kind == "concat-mlp":
        get = _mlp_tensors(params, prefix, tape)
        h = T.relu(T.linear(T.concat([fl, fr], axis=1), get("l0.w"), get("l0.b")))
        out = T.linear(h, get("l1.w"), get("l1.b"))
    elif fn.kind == "cosine":
        num = T.reduce_sum(T.mul(fl, fr), axis=1)
        den = T.mul(T.sqrt(T.reduce_sum(T.square(fl), axis=1) + 1e-12),
                    T.sqrt(T.reduce_sum(T.square(fr), axis=1) + 1e-12))
        out = T.reshape(T.div(num, den), (-1, 1))
    elif fn.kind == "gaussian":
        diff = T.sub(fl, fr)
        out = T.exp(T.mul(T.reshape(T.reduce_sum(T.square(diff), axis=1), (-1, 1)),
                          -0.5))
    else:  # rbf-mlp
        rbf = T.rbf_response(alpha, fl, fr, RBF_EXP_CAP)
        get = _mlp_tensors(params, prefix, tape)
        h = T.relu(T.linear(rbf, get("l0.w"), get("l0.b")))
        out = T.linear(h, get("l1.w"), get("l1.b"))
    return T.transpose(out, (1, 0))


def build_fce(grid: LatentGrid, feats_l: MultiScaleFeatures,
              feats_r: MultiScaleFeatures, rig: CameraRig,
              fn: ConsistencyFn = ConsistencyFn(),
              params: ParamStore | None = None, tape=None,
              prefix: str = "cons.") -> FCEVolume:
    """Warp, weight, score: the full volume, differentiable end to end."""
    coords_l, valid_l = _project_eye(grid.centers, rig.left, feats_l)
    coords_r, valid_r = _project_eye(grid.centers, rig.right, feats_r)
    valid = valid_l & valid_r
    fl, fr = _warp_with(coords_l, coords_r, valid, feats_l, feats_r)
    alpha = (_alpha_with(coords_l, coords_r, feats_l, feats_r)
             if fn.needs_alpha else None)
    scores = consistency(fl, fr, alpha, fn, params=params, tape=tape,
                         prefix=prefix)
    # re-zero invalid voxels: most kinds map zero features to nonzero scores
    masked = T.mul(scores, Tensor.const(valid.astype(np.float64)[None, :]))
    r = grid.resl
    values = T.reshape(masked, (scores.shape[0], r, r, r))
    return FCEVolume(values=values, valid=valid, grid=grid)


# ---------------------------------------------------------------------------
# inference fast path: plain numpy over voxel shards, same kernels

def _rbf_np(alpha: np.ndarray, diff: np.ndarray) -> np.ndarray:
    ex = alpha * np.square(diff)
    return np.exp(-(ex - np.maximum(ex - RBF_EXP_CAP, 0.0)))


def _fce_shard(centers: np.ndarray, flats: dict, rig: CameraRig,
               affines: dict, hw: tuple, fn: ConsistencyFn,
               weights: dict) -> tuple[np.ndarray, np.ndarray]:
    """Volume values for one contiguous block of voxels: [C_out, n]."""

    def sample(eye: str, s: int, uv: np.ndarray) -> np.ndarray:
        flat, h, w = flats[eye, s]
        return _bilinear_value_flat(flat, h, w, affines[s].apply(uv))

    uv_l, z_l, _ = project_points(centers, rig.left)
    uv_r, z_r, _ = project_points(centers, rig.right)
    valid = _validity(uv_l, z_l, hw) & _validity(uv_r, z_r, hw)
    m = valid.astype(np.float64)[:, None]
    fl = np.concatenate([sample("l", s, uv_l) for s in TEXTURE_STRIDES], axis=1) * m
    fr = np.concatenate([sample("r", s, uv_r) for s in TEXTURE_STRIDES], axis=1) * m
    diff = fl - fr
    if fn.needs_alpha:
        sl = sample("l", SEMANTIC_STRIDE, uv_l)
        sr = sample("r", SEMANTIC_STRIDE, uv_r)
        alpha = _softplus_kernel(0.5 * (sl + sr))
    if fn.kind == "rbf":
        out = _rbf_np(alpha, diff)
    elif fn.kind == "absolute-difference":
        out = np.abs(diff)
    elif fn.kind == "concat-mlp":
        h = np.maximum(np.concatenate([fl, fr], axis=1) @ weights["l0.w"]
                       + weights["l0.b"], 0.0)
        out = h @ weights["l1.w"] + weights["l1.b"]
    elif fn.kind == "cosine":
        num = np.sum(fl * fr, axis=1)
        den = (np.sqrt(np.sum(fl * fl, axis=1) + 1e-12)
               * np.sqrt(np.sum(fr * fr, axis=1) + 1e-12))
        out = (num / den)[:, None]
    elif fn.kind == "gaussian":
        out = np.exp(-0.5 * np.sum(diff * diff, axis=1))[:, None]
    else:  # rbf-mlp
        rbf = _rbf_np(alpha, diff)
        h = np.maximum(rbf @ weights["l0.w"] + weights["l0.b"], 0.0)
        out = h @ weights["l1.w"] + weights["l1.b"]
    return (out * m).T, valid


def build_fce_fast(grid: LatentGrid, feats_l: MultiScaleFeatures,
                   feats_r: MultiScaleFeatures, rig: CameraRig,
                   fn: ConsistencyFn = ConsistencyFn(),
                   params: ParamStore | None = None, threads: int = 1,
                   prefix: str = "cons.") -> FCEVolume:
    """Numpy-only volume builder, optionally sharded across threads.

    Produces the same values as :func:`build_fce` (bit-identical for the
    closed-form kinds).  Shards are contiguous voxel ranges; each thread
    writes a disjoint output block, so the reduction is a fixed-order
    concatenation regardless of completion order.
    """
    if threads < 1:
        raise ConfigError(f"thread count must be ≥ 1, got {threads}")
    strides = (*TEXTURE_STRIDES, SEMANTIC_STRIDE)

    def flat(t: Tensor):
        c, h, w = t.shape
        return np.ascontiguousarray(t.data.reshape(c, -1).T), h, w

    flats = {("l", s): flat(feats_l[s]) for s in strides}
    flats.update({("r", s): flat(feats_r[s]) for s in strides})
    weights = {}
    if fn.learned:
        if params is None:
            raise ConfigError(f"consistency kind {fn.kind!r} requires parameters")
        for tail in ("l0.w", "l0.b", "l1.w", "l1.b"):
            weights[tail] = params[f"{prefix}{tail}"].value
    affines = feats_l.affines
    hw = feats_l.image_hw
    n = grid.n_voxels
    # voxels go through in cache-friendly shards whatever the thread count
    n_shards = max(1, -(-n // SHARD_VOXELS))
    bounds = np.linspace(0, n, n_shards + 1, dtype=int)
    chunks = [grid.centers[a:b] for a, b in zip(bounds, bounds[1:]) if b > a]

    def run(chunk: np.ndarray):
        return _fce_shard(chunk, flats, rig, affines, hw, fn, weights)

    if threads == 1 or len(chunks) == 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    values = np.concatenate([p[0] for p in parts], axis=1)
    valid = np.concatenate([p[1] for p in parts])
    r = grid.resl
    vol = Tensor.const(values.reshape(values.shape[0], r, r, r))
    return FCEVolume(values=vol, valid=valid, grid=grid)
