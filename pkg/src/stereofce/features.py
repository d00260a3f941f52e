"""Siamese multi-scale feature extraction with exact per-scale pixel maps.

One weight set serves both eyes.  The net is four stages of stride-2
3×3 convolutions (the last stage downsamples twice), each followed by a
small residual block, tapping texture features at strides 2, 4 and 8 and
a semantic feature at stride 32.

The channel budget is constrained: the semantic width equals the sum of
the texture widths, because the semantic feature later parameterises a
per-channel weighting of the concatenated texture embedding.

Every convolution layer records its (stride, padding) so the affine map
from original-image pixels to feature coordinates is traced through the
actual stack rather than assumed to be division by the stride.  For a
3×3 kernel with padding 1 the receptive-field center of feature texel j
sits at pixel s·j, so the traced maps here have offset 0; the offset
would shift if the padding scheme changed, and the trace would follow.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError
from .geometry import AffineMap
from . import tensor as T
from .tensor import ParamStore, Tensor

__all__ = [
    "FeatureNetConfig",
    "MultiScaleFeatures",
    "FeatureNet",
    "TEXTURE_STRIDES",
    "SEMANTIC_STRIDE",
]

TEXTURE_STRIDES = (2, 4, 8)
SEMANTIC_STRIDE = 32


@dataclass(frozen=True)
class FeatureNetConfig:
    """Widths per tap, residual blocks per stage, and the init seed."""

    c2: int = 8
    c4: int = 16
    c8: int = 32
    c32: int = 56
    blocks: int = 1
    seed: int = 0
    # Initial bias of the final semantic conv.  The consistency kernel's
    # per-channel sharpness is softplus of the (averaged) semantic
    # feature, so this is the kernel's starting bandwidth: ≈8 makes the
    # volume contrast surfaces against free space already at random
    # texture weights, and training adapts it per channel from there.
    bandwidth_bias: float = 8.0

    def __post_init__(self):
        for name in ("c2", "c4", "c8", "c32"):
            if getattr(self, name) < 1:
                raise ConfigError(f"channel count {name} must be ≥ 1")
        if self.blocks < 0:
            raise ConfigError("blocks per stage must be ≥ 0")
        if self.c32 != self.c2 + self.c4 + self.c8:
            raise ConfigError(
                f"semantic width must equal the texture sum: "
                f"{self.c32} != {self.c2}+{self.c4}+{self.c8}")

    @property
    def texture_channels(self) -> int:
        return self.c2 + self.c4 + self.c8

    def width(self, stride: int) -> int:
        return {2: self.c2, 4: self.c4, 8: self.c8, 32: self.c32}[stride]


@dataclass(frozen=True)
class MultiScaleFeatures:
    """One eye's pyramid: stride → feature tensor, plus the pixel maps."""

    maps: dict                      # stride -> Tensor[C_s, H/s, W/s]
    affines: dict                   # stride -> AffineMap
    image_hw: tuple

    def __getitem__(self, stride: int) -> Tensor:
        return self.maps[stride]


def _he_kernel(rng: np.random.Generator, k_out: int, k_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / (k_in * 9))
    return rng.normal(0.0, std, size=(k_out, k_in, 3, 3))


class FeatureNet:
    """The siamese extractor.  Both eyes must go through one instance."""

    def __init__(self, cfg: FeatureNetConfig = FeatureNetConfig(),
                 params: ParamStore | None = None, prefix: str = "feat."):
        self.cfg = cfg
        self.params = params if params is not None else ParamStore()
        self.prefix = prefix
        rng = np.random.default_rng(cfg.seed)
        # each entry: (param name, stride, pad) for the strided trace
        self._convs: list[tuple[str, int, int]] = []
        self._stage_taps: dict[int, int] = {}   # stride -> conv index after which to tap

        def conv(name: str, c_in: int, c_out: int, stride: int, bias: float = 0.02):
            self.params.add(f"{self.prefix}{name}.k", _he_kernel(rng, c_out, c_in))
            # a small positive bias keeps early relus responsive
            self.params.add(f"{self.prefix}{name}.b", np.full(c_out, bias))
            self._convs.append((f"{self.prefix}{name}", stride, 1))

        widths = [3, cfg.c2, cfg.c4, cfg.c8]
        for stage, (c_in, c_out) in enumerate(zip(widths[:-1], widths[1:]), 1):
            conv(f"s{stage}.down", c_in, c_out, 2)
            for blk in range(cfg.blocks):
                conv(f"s{stage}.blk{blk}", c_out, c_out, 1)
            self._stage_taps[2 ** stage] = len(self._convs)
        # stage 4 downsamples twice: /8 -> /16 -> /32; the last conv's bias
        # carries the bandwidth prior (see FeatureNetConfig.bandwidth_bias)
        conv("s4.down0", cfg.c8, cfg.c32, 2)
        conv("s4.down1", cfg.c32, cfg.c32, 2,
             bias=cfg.bandwidth_bias if cfg.blocks == 0 else 0.02)
        for blk in range(cfg.blocks):
            conv(f"s4.blk{blk}", cfg.c32, cfg.c32, 1,
                 bias=cfg.bandwidth_bias if blk == cfg.blocks - 1 else 0.02)
        self._stage_taps[SEMANTIC_STRIDE] = len(self._convs)

    # ------------------------------------------------------------------
    def affine_for_scale(self, stride: int) -> AffineMap:
        """Exact original-pixel → feature-coordinate map for one tap.

        Composes u_out = (u_in − ((k−1)/2 − pad)) / s over every conv up
        to the tap, so feature texel j's receptive-field center maps back
        to exactly j.
        """
        if stride not in self._stage_taps:
            raise ConfigError(
                f"no feature tap at stride {stride}; have {sorted(self._stage_taps)}")
        scale, offset = 1.0, 0.0
        for name, s, pad in self._convs[: self._stage_taps[stride]]:
            layer_off = 1.0 - pad          # (k−1)/2 − pad for 3×3 kernels
            offset += scale * layer_off
            scale *= s
        return AffineMap(np.array([[1.0 / scale, 0.0, -offset / scale],
                                   [0.0, 1.0 / scale, -offset / scale]]))

    def affines(self) -> dict[int, AffineMap]:
        return {s: self.affine_for_scale(s) for s in (*TEXTURE_STRIDES, SEMANTIC_STRIDE)}

    # ------------------------------------------------------------------
    def _normalize(self, img: Tensor) -> Tensor:
        mu = T.reduce_mean(img)
        centered = T.sub(img, mu)
        var = T.reduce_mean(T.square(centered))
        return T.div(centered, T.sqrt(var + 1e-6))

    def extract(self, img, tape=None) -> MultiScaleFeatures:
        """Run one eye through the stack.

        ``img`` is [3,H,W] with H,W ≥ 32 and divisible by 32 (callers pad
        images at load time).  Pass a tape to record gradients; without
        one this is a pure inference pass.
        """
        if isinstance(img, Tensor):
            x = img
        else:
            # pixels are data, not parameters: keeping them off-tape lets
            # the stem conv skip its (large) input-gradient pass
            x = Tensor.const(np.asarray(img, dtype=np.float64))
        if x.ndim != 3 or x.shape[0] != 3:
            raise InputError(f"expected a [3,H,W] image, got shape {x.shape}")
        _, h, w = x.shape
        if h < 32 or w < 32:
            raise InputError(f"image {h}×{w} is smaller than one stride-32 texel")
        if h % 32 or w % 32:
            raise InputError(f"image extents {h}×{w} must be divisible by 32")

        x = self._normalize(x)
        maps: dict[int, Tensor] = {}
        taps = {idx: s for s, idx in self._stage_taps.items()}
        for i, (name, stride, pad) in enumerate(self._convs, 1):
            k = self.params[f"{name}.k"]
            b = self.params[f"{name}.b"]
            kt = tape.param(k) if tape is not None else Tensor.const(k.value)
            bt = tape.param(b) if tape is not None else Tensor.const(b.value)
            y = T.conv2d(x, kt, bt, stride=stride, pad=pad)
            if stride == 1 and y.shape == x.shape:
                x = T.relu(T.add(x, y))        # residual block
            else:
                x = T.relu(y)
            if i in taps:
                maps[taps[i]] = x
        return MultiScaleFeatures(maps=maps, affines=self.affines(), image_hw=(h, w))
