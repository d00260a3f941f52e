"""Finite-difference verification of every differentiable op, plus the
composed pipeline.

``run_suite`` returns one ``(name, max_relative_error)`` row per op and
three ``pipeline/*`` rows that push a directional derivative through the
whole network — feature convolutions, volume building, consistency
kernel, attention, and head — at a small resolution.  The CLI prints the
table; the acceptance test asserts every row is below tolerance.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor, gradcheck
from .features import FeatureNetConfig
from .fce import ConsistencyFn, build_fce
from .geometry import Box3D
from .grid import build_grid
from .head import HeadConfig, StereoDetector
from .training import cls_loss, corner_loss

__all__ = ["run_suite", "TOLERANCE"]

TOLERANCE = 1e-3


def _rng(tag: int) -> np.random.Generator:
    return np.random.default_rng([20240601, tag])


def _weighted_sum(t: Tensor, w: np.ndarray) -> Tensor:
    """Reduce any tensor to a scalar with fixed random weights."""
    return T.reduce_sum(T.mul(t, Tensor.const(w)))


def _op_cases() -> list[tuple[str, object, np.ndarray]]:
    """(name, scalar-valued fn of one tensor, input) triples."""
    r = _rng(1)
    a = r.normal(size=(3, 4))
    b = r.normal(size=(3, 4))
    pos = np.abs(r.normal(size=(3, 4))) + 0.5
    w = r.normal(size=(3, 4))
    w34 = r.normal(size=(4, 3))
    cases: list[tuple[str, object, np.ndarray]] = []

    def case(name, fn, x):
        cases.append((name, fn, np.asarray(x, dtype=float)))

    bc = Tensor.const(b)
    case("add", lambda x: _weighted_sum(T.add(x, bc), w), a)
    case("sub", lambda x: _weighted_sum(T.sub(x, bc), w), a)
    case("mul", lambda x: _weighted_sum(T.mul(x, bc), w), a)
    case("div", lambda x: _weighted_sum(T.div(x, Tensor.const(pos)), w), a)
    case("neg", lambda x: _weighted_sum(T.neg(x), w), a)
    case("exp", lambda x: _weighted_sum(T.exp(x), w), a * 0.5)
    case("log", lambda x: _weighted_sum(T.log(x), w), pos)
    case("sqrt", lambda x: _weighted_sum(T.sqrt(x), w), pos)
    case("square", lambda x: _weighted_sum(T.square(x), w), a)
    case("sigmoid", lambda x: _weighted_sum(T.sigmoid(x), w), a)
    case("softplus", lambda x: _weighted_sum(T.softplus(x), w), a)
    # keep relu inputs away from the kink, where FD is one-sided
    relu_in = a.copy()
    relu_in[np.abs(relu_in) < 0.2] += 0.4
    case("relu", lambda x: _weighted_sum(T.relu(x), w), relu_in)
    case("sin", lambda x: _weighted_sum(T.sin(x), w), a)
    case("cos", lambda x: _weighted_sum(T.cos(x), w), a)

    lw = Tensor.const(r.normal(size=(4, 5)))
    lb = Tensor.const(r.normal(size=(5,)))
    wl = r.normal(size=(3, 5))
    case("linear.x", lambda x: _weighted_sum(T.linear(x, lw, lb), wl), a)
    xc = Tensor.const(a)
    case("linear.w",
         lambda x: _weighted_sum(T.linear(xc, x, lb), wl), lw.data.copy())
    case("linear.b",
         lambda x: _weighted_sum(T.linear(xc, lw, x), wl), lb.data.copy())

    img = r.normal(size=(2, 6, 7))
    ker = r.normal(size=(4, 2, 3, 3)) * 0.5
    kb = r.normal(size=(4,))
    wc = r.normal(size=(4, 6, 7))  # stride 1, pad 1 keeps H×W
    wc2 = r.normal(size=(4, 3, 4))  # stride 2 halves H×W
    case("conv2d.x",
         lambda x: _weighted_sum(
             T.conv2d(x, Tensor.const(ker), Tensor.const(kb),
                      stride=1, pad=1), wc), img)
    case("conv2d.w",
         lambda x: _weighted_sum(
             T.conv2d(Tensor.const(img), x, Tensor.const(kb),
                      stride=1, pad=1), wc), ker)
    case("conv2d.b",
         lambda x: _weighted_sum(
             T.conv2d(Tensor.const(img), Tensor.const(ker), x,
                      stride=1, pad=1), wc), kb)
    case("conv2d.stride2",
         lambda x: _weighted_sum(
             T.conv2d(Tensor.const(img), x, Tensor.const(kb),
                      stride=2, pad=1), wc2), ker)

    fmap = r.normal(size=(3, 5, 6))
    # sample well inside cells so ±eps never crosses a bilinear kink
    uv = (np.stack([r.uniform(0.3, 4.4, size=17),
                    r.uniform(0.3, 3.4, size=17)], axis=1)
          + 0.02)
    wg = r.normal(size=(17, 3))
    case("grid_sample.feat",
         lambda x: _weighted_sum(
             T.grid_sample_bilinear(x, Tensor.const(uv)), wg), fmap)
    case("grid_sample.coords",
         lambda x: _weighted_sum(
             T.grid_sample_bilinear(Tensor.const(fmap), x), wg), uv)

    case("reduce_mean", lambda x: T.reduce_mean(x), a)
    case("reduce_sum", lambda x: T.reduce_sum(x), a)
    # well-separated values: the argmax is stable under ±eps
    mx = np.linspace(0.0, 5.0, 12).reshape(3, 4)
    wm = r.normal(size=(3,))
    case("reduce_max",
         lambda x: _weighted_sum(T.reduce_max(x, axis=1)[0], wm), mx)
    case("reshape",
         lambda x: _weighted_sum(T.reshape(x, (4, 3)), w34), a)
    case("transpose",
         lambda x: _weighted_sum(T.transpose(x, (1, 0)), w34), a)
    bc2 = Tensor.const(r.normal(size=(2, 4)))
    wcat = r.normal(size=(5, 4))
    case("concat",
         lambda x: _weighted_sum(T.concat([x, bc2], axis=0), wcat), a)
    idx = np.array([2, 5, 7, 1])
    wtk = r.normal(size=(4,))
    case("take",
         lambda x: _weighted_sum(T.take(T.reshape(x, (12,)),
                                        idx), wtk), a)
    return cases


def _pipeline_rows(eps: float = 1e-5) -> list[tuple[str, float]]:
    """Directional derivatives through the full network at resl=4.

    For a parameter P and unit direction D, the analytic side is
    ``dot(tape-gradient(P), D)`` from one on-tape forward/backward; the
    numeric side re-evaluates the loss at ``P ± eps·D``.  The chain
    crosses feature convolutions, both projections, the consistency
    kernel with its semantic bandwidth, attention, and every head layer,
    so each backward rule is exercised in composition.
    """
    r = _rng(2)
    model = StereoDetector(
        feat_cfg=FeatureNetConfig(c2=2, c4=2, c8=2, c32=6, seed=5),
        head_cfg=HeadConfig(lift_width=8, seed=5),
        fn=ConsistencyFn(), resl=4)
    img_l = r.uniform(0.0, 1.0, size=(3, 32, 32))
    img_r = np.clip(img_l + r.normal(size=img_l.shape) * 0.02, 0.0, 1.0)
    from .dataio.synthetic import make_rig, RigConfig
    rig = make_rig(RigConfig(width=32, height=32))
    gt = Box3D(0.2, 0.1, 8.0, 1.7, 1.5, 3.9, 0.3)
    coarse = Box3D(0.5, 0.2, 8.6, 1.9, 1.4, 3.5, 0.45)

    def loss_on(tape: Tape) -> Tensor:
        feats_l = model.features.extract(img_l, tape)
        feats_r = model.features.extract(img_r, tape)
        grid = build_grid(coarse, 4, model.margin)
        vol = build_fce(grid, feats_l, feats_r, rig, model.fn,
                        params=model.params, tape=tape)
        delta_t, conf_t, _ = model.head.decode(vol, tape)
        return T.add(corner_loss(delta_t, coarse, gt),
                     cls_loss(conf_t, 0.7))

    probes = [("pipeline/feature-conv", "feat.s1.down.k"),
              ("pipeline/alpha-path", "feat.s4.down0.k"),
              ("pipeline/head-lift", "head.lift.l0.w")]
    rows = []
    for i, (tag, pname) in enumerate(probes):
        param = model.params[pname]
        base = param.value.copy()
        direction = _rng(100 + i).normal(size=base.shape)
        direction /= np.linalg.norm(direction)

        tape = Tape()
        loss = loss_on(tape)
        tape.backward(loss)
        grad = tape.grad_for(param)
        if grad is None:
            rows.append((tag, float("inf")))
            continue
        analytic = float(np.sum(grad * direction))

        param.assign(base + eps * direction)
        hi = loss_on(Tape()).item()
        param.assign(base - eps * direction)
        lo = loss_on(Tape()).item()
        param.assign(base)
        numeric = (hi - lo) / (2.0 * eps)
        err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        rows.append((tag, float(err)))
    return rows


def run_suite(include_pipeline: bool = True) -> list[tuple[str, float]]:
    """Gradcheck every op (and the composed pipeline); return (name, err)."""
    rows = []
    for name, fn, x in _op_cases():
        rows.append((name, gradcheck(fn, x)))
    if include_pipeline:
        rows.extend(_pipeline_rows())
    return rows
