"""Losses, optimizer and the training loop.

The regression target is expressed through box corners rather than raw
parameters: each parameter group (position, dimensions, orientation) is
scored by reconstructing a box in which the other two groups are set to
their ground-truth residuals, so the corner distance isolates the error
attributable to that group alone.  Confidence is supervised by a soft
overlap-derived label, ramped in over the schedule ``omega``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import InputError, NumericsError
from .geometry import Box3D, box_params, corner_transform, corner_transform_t, iou3d, wrap_angle
from .grid import NoiseRanges, perturb
from .head import StereoDetector
from . import tensor as T
from .tensor import ParamStore, Tape, Tensor

__all__ = [
    "corner_loss", "confidence_label", "cls_loss", "omega",
    "Adam", "TrainConfig", "TrainSample", "EpochStats", "train",
]

_GROUPS = {
    "position": (0, 1, 2),
    "dimensions": (3, 4, 5),
    "orientation": (6,),
}

_PROB_EPS = 1e-12


def _gt_residual(b_ini: Box3D, b_gt: Box3D) -> np.ndarray:
    r = box_params(b_gt) - box_params(b_ini)
    r[6] = wrap_angle(r[6])
    return r


def corner_loss(delta_t: Tensor, b_ini: Box3D, b_gt: Box3D) -> Tensor:
    """Disentangled corner regression loss for one predicted residual.

    For each of the three parameter groups, a box is assembled from the
    prediction on that group and the exact ground-truth residual on the
    other two; its corners (plus center) are compared to the ground-truth
    corners by mean Euclidean distance.  The sum over groups is returned,
    so a perfect residual gives (numerically) zero.
    """
    if delta_t.shape != (7,):
        raise InputError(f"residual must be a 7-vector, got shape {delta_t.shape}")
    ini = Tensor.const(box_params(b_ini))
    r_gt = _gt_residual(b_ini, b_gt)
    gt_corners = Tensor.const(corner_transform(b_gt))

    total = None
    for dims in _GROUPS.values():
        mask = np.zeros(7)
        mask[list(dims)] = 1.0
        resid = T.add(T.mul(delta_t, Tensor.const(mask)),
                      Tensor.const(r_gt * (1.0 - mask)))
        corners = corner_transform_t(T.add(ini, resid))
        dist = T.sqrt(T.reduce_sum(T.square(T.sub(corners, gt_corners)), axis=0))
        group = T.reduce_mean(dist)
        total = group if total is None else T.add(total, group)
    return total


def confidence_label(b_pred: Box3D, b_gt: Box3D) -> float:
    """Soft target for the confidence branch, from the 3D overlap."""
    v = iou3d(b_pred, b_gt)
    if v > 0.75:
        return 1.0
    if v < 0.25:
        return 0.0
    return 2.0 * v - 0.5


def cls_loss(p: Tensor | float, p_hat: float) -> Tensor:
    """Binary cross-entropy against a (possibly soft) target in [0,1].

    Probabilities are nudged into [1e-12, 1-1e-12] before the logs;
    values already inside pass through bit-exactly.
    """
    if not 0.0 <= p_hat <= 1.0:
        raise InputError(f"target probability {p_hat} outside [0,1]")
    if not isinstance(p, Tensor):
        p = Tensor.const(np.asarray(p, dtype=np.float64))
    lo = Tensor.const(np.full(p.shape, _PROB_EPS))
    hi = Tensor.const(np.full(p.shape, 1.0 - _PROB_EPS))
    p = T.add(p, T.relu(T.sub(lo, p)))
    p = T.sub(p, T.relu(T.sub(p, hi)))
    one = Tensor.const(np.ones(p.shape))
    loss = T.neg(T.add(T.mul(Tensor.const(np.full(p.shape, p_hat)), T.log(p)),
                       T.mul(Tensor.const(np.full(p.shape, 1.0 - p_hat)),
                             T.log(T.sub(one, p)))))
    return T.reduce_mean(loss)


def omega(t: float) -> float:
    """Confidence-loss ramp: exp(-5·(1 - t/100)²), frozen beyond t = 100."""
    if t < 0:
        raise InputError(f"schedule time must be ≥ 0, got {t}")
    t = min(float(t), 100.0)
    return float(np.exp(-5.0 * (1.0 - t / 100.0) ** 2))


class Adam:
    """Adam with bias correction, updating a :class:`ParamStore` in place."""

    def __init__(self, params: ParamStore, lr: float = 0.000125,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise InputError(f"learning rate must be ≥ 0, got {lr}")
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.t = 0
        self._m = {name: np.zeros_like(p.value) for name, p in params.items()}
        self._v = {name: np.zeros_like(p.value) for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        """One update from a name-to-gradient mapping (missing names skip)."""
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            p = self.params[name]
            m = self._m[name] = self.beta1 * self._m[name] + (1 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1 - self.beta2) * g * g
            update = self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.assign(p.value - update)


@dataclass(frozen=True)
class TrainSample:
    """One training instance: a stereo pair and its labeled boxes."""

    scene_id: str
    img_l: np.ndarray
    img_r: np.ndarray
    rig: object
    gt_boxes: Sequence[Box3D]


@dataclass
class EpochStats:
    epoch: int
    l_reg: float
    l_cls: float
    omega: float
    total: float
    seconds: float

    def tsv(self) -> str:
        return (f"{self.epoch}\t{self.l_reg:.6f}\t{self.l_cls:.6f}"
                f"\t{self.omega:.6f}\t{self.total:.6f}\t{self.seconds:.3f}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.000125
    epochs: int = 90
    decay_epoch: int = 80
    decay_factor: float = 0.1
    iterations: int = 1
    seed: int = 0
    noise: NoiseRanges = field(default_factory=NoiseRanges)
    log_every: int = 1


def _sample_losses(model: StereoDetector, sample: TrainSample, gt: Box3D,
                   coarse: Box3D, cfg: TrainConfig, tape: Tape
                   ) -> tuple[Tensor, float, float]:
    """Forward passes and per-sample loss tensor; returns (loss, reg, cls)."""
    passes = model.detect(sample.img_l, sample.img_r, sample.rig, coarse,
                          iterations=cfg.iterations, tape=tape)
    reg_sum = None
    cls_sum = None
    for out in passes:
        l_reg = corner_loss(out.delta_t, out.coarse, gt)
        p_hat = confidence_label(out.detection.refined, gt)
        l_cls = cls_loss(out.conf_t, p_hat)
        reg_sum = l_reg if reg_sum is None else T.add(reg_sum, l_reg)
        cls_sum = l_cls if cls_sum is None else T.add(cls_sum, l_cls)
    scale = Tensor.const(np.asarray(1.0 / len(passes)))
    return (T.mul(reg_sum, scale), T.mul(cls_sum, scale))


def train(model: StereoDetector, samples: Sequence[TrainSample],
          cfg: TrainConfig = TrainConfig(), out_dir: str | Path | None = None,
          log: Callable[[str], None] | None = None) -> list[EpochStats]:
    """Optimize the detector on perturbed ground-truth coarse boxes.

    Every epoch visits each (scene, object) pair once in a seeded random
    order, draws a fresh coarse box around the ground truth, runs the
    refinement passes on tape and takes one Adam step per object.  The
    learning rate drops by ``decay_factor`` for epochs past
    ``decay_epoch``; checkpoints are written at the decay boundary and at
    the end when ``out_dir`` is given.  Raises :class:`NumericsError`
    naming the sample if any loss goes non-finite.

    Returns one :class:`EpochStats` row per epoch (also written to
    ``out_dir/train_log.tsv``).
    """
    if not samples:
        raise InputError("training requires at least one sample")
    from .checkpoint import save_checkpoint  # local import, checkpoint is optional

    pairs = [(si, oi) for si, s in enumerate(samples)
             for oi in range(len(s.gt_boxes))]
    if not pairs:
        raise InputError("no ground-truth boxes in the training samples")
    opt = Adam(model.params, lr=cfg.lr)
    history: list[EpochStats] = []
    out_path = Path(out_dir) if out_dir is not None else None
    log_lines = ["epoch\tl_reg\tl_cls\tomega\ttotal\tseconds"]

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        opt.lr = cfg.lr * (cfg.decay_factor if epoch >= cfg.decay_epoch else 1.0)
        w = omega(epoch + 1)
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(pairs))
        reg_acc = cls_acc = tot_acc = 0.0
        for k in order:
            si, oi = pairs[k]
            sample = samples[si]
            gt = sample.gt_boxes[oi]
            coarse = perturb(gt, cfg.noise, rng)
            tape = Tape()
            l_reg, l_cls = _sample_losses(model, sample, gt, coarse, cfg, tape)
            loss = T.add(l_reg, T.mul(l_cls, Tensor.const(np.asarray(w))))
            val = loss.item()
            if not np.isfinite(val):
                raise NumericsError(
                    f"non-finite loss ({val}) on sample "
                    f"{sample.scene_id!r} object {oi} at epoch {epoch}")
            tape.backward(loss)
            grads = {name: g for name, g in
                     ((name, tape.grad_for(p)) for name, p in model.params.items())
                     if g is not None}
            opt.step(grads)
            reg_acc += l_reg.item()
            cls_acc += l_cls.item()
            tot_acc += val
        n = len(pairs)
        stats = EpochStats(epoch=epoch, l_reg=reg_acc / n, l_cls=cls_acc / n,
                           omega=w, total=tot_acc / n,
                           seconds=time.perf_counter() - t0)
        history.append(stats)
        log_lines.append(stats.tsv())
        if log is not None and epoch % cfg.log_every == 0:
            log(stats.tsv())
        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)
            (out_path / "train_log.tsv").write_text("\n".join(log_lines) + "\n")
            if epoch + 1 == cfg.decay_epoch or epoch + 1 == cfg.epochs:
                save_checkpoint(out_path / f"model_ep{epoch + 1:04d}.fce",
                                model.params)
    return history
