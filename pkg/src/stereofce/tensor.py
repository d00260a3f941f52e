"""Reverse-mode automatic differentiation on a single-use tape.

The model is deliberately small.  A :class:`Tape` records every operation
whose inputs involve that tape, in execution order.  Calling
:meth:`Tape.backward` on a scalar output walks the record once in reverse,
accumulating gradients into ``.grad`` buffers on the recorded tensors.  A
tape cannot be replayed; running a forward pass again builds a new one.

Tensors wrap ``numpy`` float64 arrays and are immutable: every kernel
allocates a fresh output buffer and the wrapped array is marked read-only.
Gradient buffers are zero-initialised on first touch and accumulated with
``+=`` in reverse execution order, so results are reproducible bit for bit.

Binary operations broadcast with numpy alignment semantics: shapes are
right-aligned and a dimension of size one stretches to match its partner.
The backward pass sums gradients over every stretched or prepended axis, so
each operand receives a gradient of exactly its own shape.

Operations never mutate their inputs and never dispatch on hidden state;
with the same seed and the same inputs, forward results are bit-identical
across runs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, InputError

__all__ = [
    "Tensor",
    "Tape",
    "Parameter",
    "ParamStore",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "square",
    "sigmoid",
    "softplus",
    "relu",
    "sin",
    "cos",
    "linear",
    "conv2d",
    "grid_sample_bilinear",
    "reduce_mean",
    "reduce_sum",
    "reduce_max",
    "reshape",
    "transpose",
    "concat",
    "take",
    "gradcheck",
]

_SQRT_FLOOR = 1e-150  # keeps the sqrt derivative finite at an exact zero


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    """A read-only float64 array, optionally recorded on a tape.

    Tensors are created either as constants (no tape, no gradient), as
    leaves via :meth:`Tape.leaf` / :meth:`Tape.param`, or as op outputs.
    After ``tape.backward(loss)`` the ``grad`` attribute of every tensor
    that influenced the loss holds its accumulated gradient.
    """

    __slots__ = ("data", "tape", "grad", "_parents", "_backward", "name")

    def __init__(self, data, tape: "Tape | None" = None,
                 parents: tuple = (), backward: Callable | None = None,
                 name: str | None = None):
        self.data = _freeze(_as_array(data))
        self.tape = tape
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self.name = name
        if tape is not None and backward is not None:
            tape._record(self)

    @staticmethod
    def const(value, name: str | None = None) -> "Tensor":
        """Wrap a plain value as a gradient-free constant."""
        return Tensor(value, name=name)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(
                f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic sugar; every operator routes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)


class Parameter:
    """A named trainable array, bound to at most one leaf per tape."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = _freeze(_as_array(value).copy())

    def assign(self, value: np.ndarray) -> None:
        """Replace the stored array (optimisers rebind, never mutate)."""
        new = _as_array(value)
        if new.shape != self.value.shape:
            raise DimensionError(
                f"parameter {self.name!r}: cannot assign shape {new.shape} "
                f"over {self.value.shape}")
        self.value = _freeze(new.copy())

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class ParamStore:
    """Ordered collection of :class:`Parameter`, keyed by unique names."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value: np.ndarray) -> Parameter:
        if name in self._params:
            raise InputError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def count(self) -> int:
        return sum(p.value.size for p in self)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        from .errors import VersionError
        if list(state) != self.names():
            missing = [n for n in self.names() if n not in state]
            extra = [n for n in state if n not in self._params]
            raise VersionError(
                f"parameter names do not match (missing {missing}, unexpected {extra})")
        for name, arr in state.items():
            p = self._params[name]
            if arr.shape != p.value.shape:
                raise VersionError(
                    f"parameter {name!r}: stored shape {arr.shape} != "
                    f"model shape {p.value.shape}")
            p.assign(arr)


class Tape:
    """Execution record for one forward pass.  Single use."""

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._leaves: dict[int, Tensor] = {}
        self._consumed = False

    def _record(self, t: Tensor) -> None:
        self._nodes.append(t)

    def leaf(self, value, name: str | None = None) -> Tensor:
        """Create an input tensor whose gradient will be tracked."""
        t = Tensor(value, tape=self, name=name)
        return t

    def param(self, p: Parameter) -> Tensor:
        """Bind a parameter as a leaf.

        Binding the same parameter twice on one tape returns the same
        tensor, so fan-out (for example, siamese weight sharing) collects
        gradients from every use into a single buffer.
        """
        key = id(p)
        cached = self._leaves.get(key)
        if cached is None:
            cached = Tensor(p.value, tape=self, name=p.name)
            self._leaves[key] = cached
        return cached

    def backward(self, out: Tensor) -> None:
        """Accumulate d(out)/d(node) into ``.grad`` for every recorded node."""
        if self._consumed:
            raise InputError("tape already consumed; rebuild the forward pass")
        if out.tape is not self:
            raise InputError("output tensor was not recorded on this tape")
        if out.data.size != 1:
            raise DimensionError(
                f"backward needs a scalar output, got shape {out.shape}")
        self._consumed = True
        out.grad = np.ones_like(out.data)
        for node in reversed(self._nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the backward output w.r.t. ``t`` (zeros if unused)."""
        if t.grad is None:
            return np.zeros_like(t.data)
        return t.grad

    def grad_for(self, p: Parameter) -> np.ndarray:
        leaf = self._leaves.get(id(p))
        if leaf is None:
            return np.zeros_like(p.value)
        return self.grad(leaf)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _merge_tape(*tensors: Tensor) -> Tape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise InputError("operands were recorded on different tapes")
    return tape


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.tape is None:
        return
    if t.grad is None:
        # copy, not alias: the same buffer may feed several children
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over the axes numpy broadcasting stretched or prepended."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _binary(a, b, fwd, bwd_a, bwd_b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    tape = _merge_tape(a, b)
    try:
        out = fwd(a.data, b.data)
    except ValueError as e:
        raise DimensionError(
            f"shapes {a.shape} and {b.shape} do not broadcast") from e
    if tape is None:
        return Tensor(out)

    def backward(g):
        if a.tape is not None:
            ga = bwd_a(g, a.data, b.data, out)
            if ga is not None:
                _accum(a, _unbroadcast(ga, a.shape))
        if b.tape is not None:
            gb = bwd_b(g, a.data, b.data, out)
            if gb is not None:
                _accum(b, _unbroadcast(gb, b.shape))

    return Tensor(out, tape, (a, b), backward)


def _unary(x, fwd, dfun) -> Tensor:
    x = _as_tensor(x)
    out = fwd(x.data)
    if x.tape is None:
        return Tensor(out)

    def backward(g):
        _accum(x, g * dfun(x.data, out))

    return Tensor(out, x.tape, (x,), backward)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    return _binary(a, b, np.add,
                   lambda g, xa, xb, o: g,
                   lambda g, xa, xb, o: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract,
                   lambda g, xa, xb, o: g,
                   lambda g, xa, xb, o: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply,
                   lambda g, xa, xb, o: g * xb,
                   lambda g, xa, xb, o: g * xa)


def div(a, b) -> Tensor:
    return _binary(a, b, np.divide,
                   lambda g, xa, xb, o: g / xb,
                   lambda g, xa, xb, o: -g * o / xb)


def neg(x) -> Tensor:
    return _unary(x, np.negative, lambda d, o: -1.0)


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda d, o: o)


def log(x) -> Tensor:
    return _unary(x, np.log, lambda d, o: 1.0 / d)


def sqrt(x) -> Tensor:
    return _unary(x, np.sqrt,
                  lambda d, o: 0.5 / np.maximum(o, _SQRT_FLOOR))


def square(x) -> Tensor:
    return _unary(x, np.square, lambda d, o: 2.0 * d)


def _sigmoid_kernel(z: np.ndarray) -> np.ndarray:
    # exp only ever sees non-positive arguments, so it cannot overflow
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    return _unary(x, _sigmoid_kernel, lambda d, o: o * (1.0 - o))


def _softplus_kernel(z: np.ndarray) -> np.ndarray:
    # for z > 30 the linear branch is exact to double precision
    return np.where(z > 30.0, z, np.log1p(np.exp(np.minimum(z, 30.0))))


def softplus(x) -> Tensor:
    return _unary(x, _softplus_kernel, lambda d, o: _sigmoid_kernel(d))


def relu(x) -> Tensor:
    return _unary(x, lambda d: np.maximum(d, 0.0),
                  lambda d, o: (d > 0).astype(np.float64))


def sin(x) -> Tensor:
    return _unary(x, np.sin, lambda d, o: np.cos(d))


def cos(x) -> Tensor:
    return _unary(x, np.cos, lambda d, o: -np.sin(d))


# ---------------------------------------------------------------------------
# linear algebra

def linear(x, w, b) -> Tensor:
    """``x @ w + b`` for ``x`` of shape [N, Cin], ``w`` [Cin, Cout], ``b`` [Cout]."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2:
        raise DimensionError(
            f"linear expects 2-d x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"linear: x has {x.shape[1]} input channels but w expects {w.shape[0]}")
    if b.shape != (w.shape[1],):
        raise DimensionError(
            f"linear: bias shape {b.shape} does not match {w.shape[1]} outputs")
    tape = _merge_tape(x, w, b)
    out = x.data @ w.data + b.data
    if tape is None:
        return Tensor(out)

    def backward(g):
        if x.tape is not None:
            _accum(x, g @ w.data.T)
        if w.tape is not None:
            _accum(w, x.data.T @ g)
        if b.tape is not None:
            _accum(b, g.sum(axis=0))

    return Tensor(out, tape, (x, w, b), backward)


def _conv2d_cols(x: np.ndarray, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    """im2col for 3x3 kernels: [C,H,W] -> ([C*9, Ho*Wo], Ho, Wo)."""
    c, h, w = x.shape
    ho = (h + 2 * pad - 3) // stride + 1
    wo = (w + 2 * pad - 3) // stride + 1
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]            # [C, Ho, Wo, 3, 3]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * 9, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d_out_shape(h: int, w: int, stride: int, pad: int) -> tuple[int, int]:
    return (h + 2 * pad - 3) // stride + 1, (w + 2 * pad - 3) // stride + 1


def conv2d(x, k, b, stride: int = 1, pad: int = 1) -> Tensor:
    """2-d convolution of a [C,H,W] map with a [K,C,3,3] kernel stack.

    Zero padding of ``pad`` pixels on each border, square stride.  Output
    is [K,Ho,Wo] with Ho = (H + 2*pad - 3) // stride + 1 and Wo likewise.
    """
    x, k, b = _as_tensor(x), _as_tensor(k), _as_tensor(b)
    if x.ndim != 3:
        raise DimensionError(f"conv2d expects a [C,H,W] input, got {x.shape}")
    if k.ndim != 4 or k.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d expects [K,C,3,3] kernels, got {k.shape}")
    if k.shape[1] != x.shape[0]:
        raise DimensionError(
            f"conv2d: input has {x.shape[0]} channels but kernels expect {k.shape[1]}")
    if b.shape != (k.shape[0],):
        raise DimensionError(
            f"conv2d: bias shape {b.shape} does not match {k.shape[0]} kernels")
    if stride < 1 or pad < 0:
        raise InputError(f"conv2d: invalid stride {stride} or pad {pad}")
    c, h, w = x.shape
    ho, wo = conv2d_out_shape(h, w, stride, pad)
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: input {x.shape} too small for stride {stride}, pad {pad}")
    nk = k.shape[0]
    tape = _merge_tape(x, k, b)
    cols, _, _ = _conv2d_cols(x.data, stride, pad)
    k2 = k.data.reshape(nk, c * 9)
    out = (k2 @ cols + b.data[:, None]).reshape(nk, ho, wo)
    if tape is None:
        return Tensor(out)

    def backward(g):
        g2 = g.reshape(nk, ho * wo)
        if b.tape is not None:
            _accum(b, g2.sum(axis=1))
        if k.tape is not None:
            _accum(k, (g2 @ cols.T).reshape(k.shape))
        if x.tape is None:
            return
        dcols = (k2.T @ g2).reshape(c, 3, 3, ho, wo)
        hp, wp = h + 2 * pad, w + 2 * pad
        dxp = np.zeros((c, hp, wp), dtype=np.float64)
        for ki in range(3):
            for kj in range(3):
                dxp[:, ki:ki + stride * ho:stride,
                    kj:kj + stride * wo:stride] += dcols[:, ki, kj]
        _accum(x, dxp[:, pad:pad + h, pad:pad + w] if pad else dxp)

    return Tensor(out, tape, (x, k, b), backward)


def _corner_weights(uv: np.ndarray):
    u, v = uv[:, 0], uv[:, 1]
    x0 = np.floor(u)
    y0 = np.floor(v)
    fx, fy = u - x0, v - y0
    x0i, y0i = x0.astype(np.int64), y0.astype(np.int64)
    weights = ((0, 0, (1 - fx) * (1 - fy)),
               (1, 0, fx * (1 - fy)),
               (0, 1, (1 - fx) * fy),
               (1, 1, fx * fy))
    return x0i, y0i, fx, fy, weights


def _bilinear_forward(feat: np.ndarray, uv: np.ndarray, keep_texels: bool):
    """Bilinear kernel keeping per-corner gather info for the backward pass.

    ``keep_texels`` retains the gathered corner values, which the
    coordinate gradient needs; when the coordinates are constants the
    masked weights alone suffice and the forward runs with one fewer
    pass over the data (folding the border mask into the weight is
    IEEE-identical for finite feature maps).
    """
    c, h, w = feat.shape
    x0i, y0i, fx, fy, weights = _corner_weights(uv)
    flat = np.ascontiguousarray(feat.reshape(c, -1).T)   # [H*W, C]
    corners = []
    out = None
    for dx, dy, wgt in weights:
        xi, yi = x0i + dx, y0i + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        lin = np.minimum(np.maximum(yi, 0), h - 1) * w \
            + np.minimum(np.maximum(xi, 0), w - 1)
        if keep_texels:
            texel = flat[lin] * valid[:, None]           # zeros outside
            term = wgt[:, None] * texel
            corners.append((lin, wgt * valid, texel))
        else:
            masked = wgt * valid
            term = masked[:, None] * flat[lin]
            corners.append((lin, masked, None))
        out = term if out is None else out + term
    return out, corners, fx, fy


def _bilinear_value_flat(flat: np.ndarray, h: int, w: int,
                         uv: np.ndarray) -> np.ndarray:
    x0i, y0i, _, _, weights = _corner_weights(uv)
    out = None
    for dx, dy, wgt in weights:
        xi, yi = x0i + dx, y0i + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        lin = np.minimum(np.maximum(yi, 0), h - 1) * w \
            + np.minimum(np.maximum(xi, 0), w - 1)
        term = (wgt * ok)[:, None] * flat[lin]
        out = term if out is None else out + term
    return out


def bilinear_value(feat: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Forward-only bilinear sampling, bit-identical to the recorded op.

    Folds the border mask into the corner weights instead of zeroing
    texels, which gives the same IEEE result for finite feature maps at
    half the elementwise work.  Callers sampling one map many times can
    pre-transpose it once and use :func:`_bilinear_value_flat`.
    """
    c, h, w = feat.shape
    flat = np.ascontiguousarray(feat.reshape(c, -1).T)
    return _bilinear_value_flat(flat, h, w, uv)


def grid_sample_bilinear(feat, coords) -> Tensor:
    """Sample a [C,H,W] feature map at fractional pixel coordinates.

    ``coords`` is [N,2] as (u, v) in pixel units of the feature map, where
    (0, 0) is the centre of the top-left texel.  Samples use bilinear
    interpolation with zero padding outside the map, which makes the output
    continuous in the coordinates everywhere, including across the border.
    Gradients flow both into ``feat`` and into ``coords``.
    """
    feat, coords = _as_tensor(feat), _as_tensor(coords)
    if feat.ndim != 3:
        raise DimensionError(
            f"grid_sample_bilinear expects [C,H,W] features, got {feat.shape}")
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DimensionError(
            f"grid_sample_bilinear expects [N,2] coords, got {coords.shape}")
    if not np.isfinite(coords.data).all():
        raise InputError("grid_sample_bilinear: non-finite coordinates")
    tape = _merge_tape(feat, coords)
    out, corners, fx, fy = _bilinear_forward(feat.data, coords.data,
                                             keep_texels=coords.tape is not None)
    if tape is None:
        return Tensor(out)

    c, h, w = feat.shape

    def backward(g):
        if feat.tape is not None:
            gflat = np.zeros((h * w, c), dtype=np.float64)
            idx = np.concatenate([lin for lin, _, _ in corners])
            val = np.concatenate([mw[:, None] * g for _, mw, _ in corners])
            np.add.at(gflat, idx, val)
            _accum(feat, gflat.T.reshape(c, h, w))
        if coords.tape is not None:
            (_, _, t00), (_, _, t10), (_, _, t01), (_, _, t11) = corners
            du = ((1 - fy)[:, None] * (t10 - t00) + fy[:, None] * (t11 - t01))
            dv = ((1 - fx)[:, None] * (t01 - t00) + fx[:, None] * (t11 - t10))
            gc = np.stack([(g * du).sum(axis=1), (g * dv).sum(axis=1)], axis=1)
            _accum(coords, gc)

    return Tensor(out, tape, (feat, coords), backward)


def rbf_response(alpha, fl, fr, cap: float) -> Tensor:
    """Fused ``exp(-min(alpha * (fl - fr)**2, cap))`` with shared backward.

    Computes the same IEEE sequence as the composed ops
    ``exp(neg(ex - relu(ex - cap)))`` with ``ex = alpha * (fl - fr)**2``,
    but records one node instead of six, which matters on the volume-sized
    arrays this runs on.  The cap only bounds the exponent so the output
    never underflows to a denormal storm; gradients are zero past it,
    matching the composed form's relu subgradient.
    """
    alpha, fl, fr = _as_tensor(alpha), _as_tensor(fl), _as_tensor(fr)
    if not (alpha.shape == fl.shape == fr.shape):
        raise DimensionError(
            f"rbf_response: shapes {alpha.shape}, {fl.shape}, {fr.shape} differ")
    tape = _merge_tape(alpha, fl, fr)
    diff = fl.data - fr.data
    d2 = diff * diff
    ex = alpha.data * d2
    out = np.exp(-(ex - np.maximum(ex - cap, 0.0)))
    if tape is None:
        return Tensor(out)

    def backward(g):
        # d(out)/d(ex) = -out inside the cap, 0 past it (relu subgradient)
        gex = g * out
        if (ex > cap).any():
            gex = np.where(ex > cap, 0.0, gex)
        if alpha.tape is not None:
            _accum(alpha, _unbroadcast(-gex * d2, alpha.shape))
        if fl.tape is not None or fr.tape is not None:
            gd = gex * (alpha.data * (2.0 * diff))
            if fl.tape is not None:
                _accum(fl, _unbroadcast(-gd, fl.shape))
            if fr.tape is not None:
                _accum(fr, _unbroadcast(gd, fr.shape))

    return Tensor(out, tape, (alpha, fl, fr), backward)


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(axis: int | None, ndim: int) -> int | None:
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def reduce_mean(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    out = np.mean(x.data, axis=axis)
    if x.tape is None:
        return Tensor(out)
    n = x.size if axis is None else x.shape[axis]

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g / n, x.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy())

    return Tensor(out, x.tape, (x,), backward)


def reduce_sum(x, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axis)
    if x.tape is None:
        return Tensor(out)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
        else:
            _accum(x, np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return Tensor(out, x.tape, (x,), backward)


def reduce_max(x, axis: int | None = None) -> tuple[Tensor, np.ndarray]:
    """Max reduction.  Returns (values, argmax indices).

    Under ties the gradient goes to the first index in memory order, which
    matches the returned argmax.
    """
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    out = np.max(x.data, axis=axis)
    idx = np.argmax(x.data, axis=axis)
    if x.tape is None:
        return Tensor(out), idx

    def backward(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        if axis is None:
            gx.reshape(-1)[idx] = g
        else:
            np.put_along_axis(gx, np.expand_dims(idx, axis),
                              np.expand_dims(g, axis), axis)
        _accum(x, gx)

    return Tensor(out, x.tape, (x,), backward), idx


# ---------------------------------------------------------------------------
# structural ops

def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from e
    if x.tape is None:
        return Tensor(out)

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return Tensor(out, x.tape, (x,), backward)


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    out = np.transpose(x.data, axes)
    if x.tape is None:
        return Tensor(out)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g):
        _accum(x, np.transpose(g, inv))

    return Tensor(out, x.tape, (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise InputError("concat needs at least one tensor")
    tape = _merge_tape(*ts)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError(
            f"concat: incompatible shapes {[t.shape for t in ts]}") from e
    if tape is None:
        return Tensor(out)
    ax = axis % out.ndim
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, splits, axis=ax)):
            _accum(t, piece)

    return Tensor(out, tape, tuple(ts), backward)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather rows along ``axis`` (integer indices, duplicates allowed)."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    ax = _norm_axis(axis, x.ndim)
    if np.any(idx < 0) or np.any(idx >= x.shape[ax]):
        raise InputError(
            f"take: index out of range for axis {ax} of shape {x.shape}")
    out = np.take(x.data, idx, axis=ax)
    if x.tape is None:
        return Tensor(out)

    def backward(g):
        gx = np.zeros(x.shape, dtype=np.float64)
        moved = np.moveaxis(gx, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        _accum(x, gx)

    return Tensor(out, x.tape, (x,), backward)


# ---------------------------------------------------------------------------
# finite-difference verification

def gradcheck(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4) -> float:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` must map one tensor to a scalar tensor.  Returns the maximum over
    elements of ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    The numeric side evaluates ``f`` twice per element of ``x`` at
    ``x ± eps``, off tape.
    """
    x = _as_array(x)
    tape = Tape()
    xt = tape.leaf(x)
    y = f(xt)
    if not isinstance(y, Tensor) or y.size != 1:
        raise DimensionError("gradcheck: f must return a scalar tensor")
    tape.backward(y)
    analytic = tape.grad(xt)

    numeric = np.zeros_like(x)
    flat = x.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + eps
        hi = f(Tensor.const(bumped.reshape(x.shape))).item()
        bumped[i] = flat[i] - eps
        lo = f(Tensor.const(bumped.reshape(x.shape))).item()
        nflat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
