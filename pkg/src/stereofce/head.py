"""Point-network detector head over the FCE volume, and the full pipeline.

Every voxel's consistency vector is lifted by a shared MLP (optionally
with the voxel's normalized grid coordinates appended), reweighted by a
structure-aware attention map computed on the height-averaged volume,
max-pooled into a single descriptor, and decoded into a 7-parameter box
residual plus a confidence score.

:class:`StereoDetector` wires the pieces together: one siamese feature
extraction per stereo pair, then one grid-FCE-head pass per refinement
iteration, each pass re-centered on the previous pass's refined box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .fce import ConsistencyFn, FCEVolume, build_fce, build_fce_fast
from .features import FeatureNet, FeatureNetConfig, MultiScaleFeatures
from .geometry import Box3D, CameraRig
from .grid import DEFAULT_MARGIN, build_grid, refine
from . import tensor as T
from .tensor import ParamStore, Tensor

__all__ = ["HeadConfig", "Detection", "DetectorHead", "StereoDetector", "PassOutput"]


@dataclass(frozen=True)
class HeadConfig:
    """Head widths and switches.  The attention kernel is fixed at 3×3."""

    lift_width: int = 64
    lift_depth: int = 2
    branch_depth: int = 2
    coord_append: bool = True
    seed: int = 1
    # The regression branch works in units of the expected coarse-box
    # disturbance, one scale per parameter (X,Y,Z,W,H,L,theta).  The last
    # linear layer then only needs O(1) weights to undo a worst-case
    # disturbance instead of growing a hundredfold from its near-zero
    # init, which an elementwise optimizer would take thousands of steps
    # to do.
    delta_scale: tuple = (2.0, 0.8, 3.0, 1.5, 1.5, 1.5, 0.6)

    def __post_init__(self):
        if self.lift_width < 8:
            raise ConfigError(f"lift width must be ≥ 8, got {self.lift_width}")
        if self.lift_depth < 1 or self.branch_depth < 1:
            raise ConfigError("lift_depth and branch_depth must be ≥ 1")
        if len(self.delta_scale) != 7 or any(s <= 0 for s in self.delta_scale):
            raise ConfigError("delta_scale needs 7 positive entries")


@dataclass(frozen=True)
class Detection:
    """One refinement step's outcome."""

    delta: np.ndarray        # 7-vector residual (meters ×6, radians)
    confidence: float        # strictly inside (0,1)
    refined: Box3D

    def __post_init__(self):
        if not np.all(np.isfinite(self.delta)):
            raise InputError(f"non-finite residual {self.delta}")
        if not 0.0 < self.confidence < 1.0:
            raise InputError(f"confidence {self.confidence} outside (0,1)")


@dataclass(frozen=True)
class PassOutput:
    """Tensors of one forward pass (kept for the loss) plus the detection."""

    coarse: Box3D
    delta_t: Tensor
    conf_t: Tensor
    logit_t: Tensor
    detection: Detection
    volume: FCEVolume


def normalized_grid_coords(resl: int) -> np.ndarray:
    """Per-voxel local coordinates in [−1,1]³, same (ix,iy,iz) order as grids."""
    frac = (np.arange(resl, dtype=np.float64) + 0.5) / resl * 2.0 - 1.0
    out = np.zeros((resl, resl, resl, 3), dtype=np.float64)
    out[..., 0] = frac[:, None, None]
    out[..., 1] = frac[None, :, None]
    out[..., 2] = frac[None, None, :]
    return out.reshape(-1, 3)


def coordinate_readout_init(rng: np.random.Generator, in_channels: int,
                            width: int) -> tuple[np.ndarray, np.ndarray]:
    """First lift layer weights that make max-pooling read out geometry.

    A random unit's maximum over the grid is dominated by noise, so the
    pooled descriptor starts out blind and the optimizer has to discover
    coordinate structure one argmax voxel at a time.  Instead, part of
    the bank is initialized as response/coordinate trade-off units:
    ``relu(β·(response readout) ± κ·axis + b)``.  Each such unit's max
    sits where high consistency meets an extreme coordinate — a soft
    edge of the matched region along one axis — so the descriptor
    encodes where the response mass ends in every direction from the
    first step, and gradients move those edges instead of re-deriving
    them.  β balances κ so one voxel step trades against a typical
    response contrast.  The remaining units stay random; training uses
    them for whatever the edges miss (orientation, dimensions).

    Returns ``(w, b)`` with ``w`` shaped [in_channels+3, width]: the
    caller appends normalized coordinates as the last 3 inputs.
    """
    c = in_channels
    w = np.zeros((c + 3, width))
    b = np.full(width, 0.1)
    # round-robin over the 6 signed axes so any prefix covers them evenly
    variants = [(6.0, 1.5, "mean"), (6.0, 3.0, "mean"), (3.0, 1.5, "mean"),
                (3.0, 3.0, "mean"), (6.0, 1.5, "single"), (6.0, 3.0, "single")]
    patterns = [(axis, sign, v) for v in variants
                for axis in (0, 1, 2) for sign in (+1.0, -1.0)]
    n_struct = min(len(patterns), max(0, width - width // 4))
    for j in range(n_struct):
        axis, sign, (beta, kappa, kind) = patterns[j]
        if kind == "mean":
            w[:c, j] = beta * rng.normal(1.0, 0.15, c) / c
        else:
            w[int(rng.integers(0, c)), j] = beta * 0.5
        w[c + axis, j] = sign * kappa
    if n_struct < width:
        w[:, n_struct:] = rng.normal(0.0, 0.3, (c + 3, width - n_struct))
    return w, b


class DetectorHead:
    """Lift → attention → aggregate → regress, on one ParamStore."""

    def __init__(self, in_channels: int, cfg: HeadConfig = HeadConfig(),
                 params: ParamStore | None = None, prefix: str = "head."):
        self.cfg = cfg
        self.in_channels = in_channels
        self.params = params if params is not None else ParamStore()
        self.prefix = prefix
        rng = np.random.default_rng(cfg.seed)
        w = cfg.lift_width
        lift_in = in_channels + (3 if cfg.coord_append else 0)

        def lin(name, c_in, c_out, std=None):
            if std is None:
                std = np.sqrt(2.0 / c_in)
            self.params.add(f"{prefix}{name}.w",
                            rng.normal(0.0, std, (c_in, c_out)))
            self.params.add(f"{prefix}{name}.b",
                            np.full(c_out, 0.02 if std > 0.02 else 0.0))

        if cfg.coord_append:
            w0, b0 = coordinate_readout_init(rng, in_channels, w)
            self.params.add(f"{prefix}lift.l0.w", w0)
            self.params.add(f"{prefix}lift.l0.b", b0)
        else:
            lin("lift.l0", lift_in, w)
        for i in range(1, cfg.lift_depth):
            # near-identity: deeper lift layers start by passing the
            # coordinate-readout structure through unchanged
            self.params.add(f"{prefix}lift.l{i}.w",
                            np.eye(w) + rng.normal(0.0, 0.05, (w, w)))
            self.params.add(f"{prefix}lift.l{i}.b", np.full(w, 0.05))
        # zero attention start: G_m == 0.5, G_a == 1.5·G_h on step one.
        # Gradients still reach the kernel through the sigmoid gate.
        self.params.add(f"{prefix}att.k", np.zeros((w, w, 3, 3)))
        self.params.add(f"{prefix}att.b", np.zeros(w))
        for branch, n_out in (("delta", 7), ("conf", 1)):
            widths = [w] + [w // 2] * (cfg.branch_depth - 1) + [n_out]
            for i in range(cfg.branch_depth):
                # near-zero final layer: the first residual is centimeters,
                # the first confidence near 0.5, yet gradients pass through
                std = 0.01 if i == cfg.branch_depth - 1 else None
                lin(f"{branch}.l{i}", widths[i], widths[i + 1], std=std)

    def _p(self, name: str, tape) -> Tensor:
        p = self.params[f"{self.prefix}{name}"]
        return tape.param(p) if tape is not None else Tensor.const(p.value)

    # ------------------------------------------------------------------
    def lift(self, vol: FCEVolume, tape=None) -> Tensor:
        """Shared per-voxel MLP: [C,r,r,r] volume to [W,r,r,r] embedding."""
        c = vol.values.shape[0]
        r = vol.grid.resl
        if c != self.in_channels:
            raise ConfigError(
                f"head expects {self.in_channels} input channels, volume has {c}")
        x = T.transpose(T.reshape(vol.values, (c, r ** 3)), (1, 0))
        if self.cfg.coord_append:
            x = T.concat([x, Tensor.const(normalized_grid_coords(r))], axis=1)
        h = x
        for i in range(self.cfg.lift_depth):
            h = T.relu(T.linear(h, self._p(f"lift.l{i}.w", tape),
                                self._p(f"lift.l{i}.b", tape)))
        return T.reshape(T.transpose(h, (1, 0)), (self.cfg.lift_width, r, r, r))

    def straa(self, gh: Tensor, tape=None) -> Tensor:
        """Structure-aware attention over the height-collapsed volume.

        Mean over the height axis, one 3×3 conv, sigmoid; the resulting
        per-column gate multiplies every height cell and the input is
        added back (residual), so a zeroed conv leaves 1.5·G_h.
        """
        w, r = gh.shape[0], gh.shape[1]
        pooled = T.reduce_mean(gh, axis=2)          # [W, ix, iz]
        gate = T.sigmoid(T.conv2d(pooled, self._p("att.k", tape),
                                  self._p("att.b", tape), stride=1, pad=1))
        gate3 = T.reshape(gate, (w, r, 1, r))
        return T.add(T.mul(gh, gate3), gh)

    def aggregate_and_regress(self, ga: Tensor, tape=None
                              ) -> tuple[Tensor, Tensor, Tensor]:
        """Max over voxels, then the two decoder branches.

        Returns (delta [7], confidence [1], logit [1]); confidence is the
        sigmoid of the logit.
        """
        w = ga.shape[0]
        desc, _ = T.reduce_max(T.reshape(ga, (w, -1)), axis=1)
        row = T.reshape(desc, (1, w))

        def branch(name: str, n_out: int) -> Tensor:
            h = row
            for i in range(self.cfg.branch_depth - 1):
                h = T.relu(T.linear(h, self._p(f"{name}.l{i}.w", tape),
                                    self._p(f"{name}.l{i}.b", tape)))
            last = self.cfg.branch_depth - 1
            return T.reshape(T.linear(h, self._p(f"{name}.l{last}.w", tape),
                                      self._p(f"{name}.l{last}.b", tape)),
                             (n_out,))

        raw = branch("delta", 7)
        delta = T.mul(raw, Tensor.const(np.asarray(self.cfg.delta_scale,
                                                   dtype=np.float64)))
        logit = branch("conf", 1)
        return delta, T.sigmoid(logit), logit

    def decode(self, vol: FCEVolume, tape=None) -> tuple[Tensor, Tensor, Tensor]:
        return self.aggregate_and_regress(self.straa(self.lift(vol, tape), tape), tape)


class StereoDetector:
    """Feature net + consistency + head behind one parameter store."""

    def __init__(self, feat_cfg: FeatureNetConfig = FeatureNetConfig(),
                 head_cfg: HeadConfig = HeadConfig(),
                 fn: ConsistencyFn = ConsistencyFn(),
                 resl: int = 10, margin: float = DEFAULT_MARGIN):
        if resl < 2:
            raise ConfigError(f"grid resolution must be ≥ 2, got {resl}")
        self.params = ParamStore()
        self.feat_cfg = feat_cfg
        self.head_cfg = head_cfg
        self.fn = fn
        self.resl = int(resl)
        self.margin = float(margin)
        self.features = FeatureNet(feat_cfg, params=self.params)
        fn.create_params(self.params, feat_cfg.texture_channels, seed=head_cfg.seed)
        self.head = DetectorHead(fn.out_channels(feat_cfg.texture_channels),
                                 head_cfg, params=self.params)

    def extract_pair(self, img_l, img_r, tape=None
                     ) -> tuple[MultiScaleFeatures, MultiScaleFeatures]:
        return (self.features.extract(img_l, tape),
                self.features.extract(img_r, tape))

    def detect(self, img_l, img_r, rig: CameraRig, coarse: Box3D,
               iterations: int = 1, tape=None, threads: int = 1
               ) -> list[PassOutput]:
        """Run ``iterations + 1`` refinement passes from a coarse box.

        Features are extracted once per eye and reused by every pass.
        Pass t builds its grid on pass t−1's refined box; gradients do
        not flow across passes (each starts from a detached box).  With a
        tape the differentiable volume builder runs; without one the
        sharded numpy path serves inference, fanning out over ``threads``.
        """
        if iterations < 0:
            raise InputError(f"iterations must be ≥ 0, got {iterations}")
        feats_l, feats_r = self.extract_pair(img_l, img_r, tape)
        return self.refine_from(feats_l, feats_r, rig, coarse,
                                iterations=iterations, tape=tape, threads=threads)

    def refine_from(self, feats_l: MultiScaleFeatures, feats_r: MultiScaleFeatures,
                    rig: CameraRig, coarse: Box3D, iterations: int = 1,
                    tape=None, threads: int = 1) -> list[PassOutput]:
        """The per-pass loop, reusing already-extracted features."""
        outputs: list[PassOutput] = []
        box = coarse
        for _ in range(iterations + 1):
            grid = build_grid(box, self.resl, self.margin)
            if tape is None:
                vol = build_fce_fast(grid, feats_l, feats_r, rig, self.fn,
                                     params=self.params, threads=threads)
            else:
                vol = build_fce(grid, feats_l, feats_r, rig, self.fn,
                                params=self.params, tape=tape)
            delta_t, conf_t, logit_t = self.head.decode(vol, tape)
            refined = refine(box, delta_t.data)
            det = Detection(delta=delta_t.data.copy(),
                            confidence=float(conf_t.data[0]),
                            refined=refined)
            outputs.append(PassOutput(coarse=box, delta_t=delta_t, conf_t=conf_t,
                                      logit_t=logit_t, detection=det, volume=vol))
            box = refined
        return outputs
