"""Layers and the two distinctive building blocks: attention condensers and PEPE blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import DTYPE, Tensor


class Module:
    """Container with ordered parameters, buffers and child modules.

    Parameters are trainable tensors; buffers are plain arrays (batchnorm
    running statistics). Both are enumerated in declaration order, which is
    also the checkpoint payload order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        arr = np.asarray(value, dtype=DTYPE).copy()
        self._buffers[name] = arr
        return arr

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def to_dtype(self, dtype) -> "Module":
        """Cast parameters in place (float64 is used by gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, training: bool = False) -> Tensor:
        return self.forward(x, training=training)


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


class ConvUnit(Module):
    """Convolution, optionally followed by batchnorm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 groups: int = 1, bias: bool = True, bn: bool = True, act: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if in_ch % groups or out_ch % groups:
            raise ValueError(f"channels {in_ch}->{out_ch} not divisible by groups {groups}")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding, self.groups = stride, kernel // 2, groups
        self.act = act
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = self.add_param("weight", he_normal(rng, (out_ch, in_ch // groups, kernel, kernel), fan_in))
        self.bias = self.add_param("bias", np.zeros(out_ch)) if bias else None
        self.bn = bn
        if bn:
            self.gamma = self.add_param("bn_gamma", np.ones(out_ch))
            self.beta = self.add_param("bn_beta", np.zeros(out_ch))
            self.running_mean = self.add_buffer("bn_running_mean", np.zeros(out_ch))
            self.running_var = self.add_buffer("bn_running_var", np.ones(out_ch))

    def forward(self, x, training=False):
        y = F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)
        if self.bn:
            y = F.batchnorm2d(y, self.gamma, self.beta, self.running_mean, self.running_var,
                              training=training)
        return F.relu(y) if self.act else y


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.standard_normal((out_features, in_features)) * np.sqrt(1.0 / in_features)
        self.weight = self.add_param("weight", w)
        self.bias = self.add_param("bias", np.zeros(out_features))

    def forward(self, x, training=False):
        return F.dense(x, self.weight, self.bias)


# -- attention condenser ----------------------------------------------------------
@dataclass(frozen=True)
class AttentionCondenserSpec:
    in_channels: int
    condense_factor: int = 2
    embed_channels: int = 8
    groups: int = 1
    scale_init: float = 1.0

    def validate(self) -> None:
        if self.condense_factor < 2:
            raise ValueError(f"condense_factor must be >= 2, got {self.condense_factor}")
        if not 1 <= self.embed_channels <= self.in_channels:
            raise ValueError(
                f"embed_channels {self.embed_channels} must lie in [1, in_channels={self.in_channels}]"
            )
        if self.in_channels % self.groups or self.embed_channels % self.groups:
            raise ValueError(
                f"groups {self.groups} must divide in_channels {self.in_channels} "
                f"and embed_channels {self.embed_channels}"
            )


class AttentionCondenser(Module):
    """Self-attention gate computed on a spatially condensed copy of the input.

    Forward::

        Q = maxpool(V, f)
        E = expand_1x1(relu(bn(dw_3x3(relu(bn(embed_1x1_grouped(Q)))))))
        A = upsample(E, f)
        out = V * sigmoid(A) * S

    ``S`` is a learned per-channel scale. The gate logits (``expand``) carry a
    bias but no batchnorm, so the gate can saturate.
    """

    def __init__(self, spec: AttentionCondenserSpec, rng: np.random.Generator | None = None):
        super().__init__()
        spec.validate()
        self.spec = spec
        c, e = spec.in_channels, spec.embed_channels
        self.embed = self.add_module("embed", ConvUnit(c, e, kernel=1, groups=spec.groups, rng=rng))
        self.mix = self.add_module("mix", ConvUnit(e, e, kernel=3, groups=e, rng=rng))
        self.expand = self.add_module("expand", ConvUnit(e, c, kernel=1, bn=False, act=False, rng=rng))
        self.scale = self.add_param("scale", np.full(c, spec.scale_init))

    def attention_logits(self, v: Tensor, training: bool = False) -> Tensor:
        f = self.spec.condense_factor
        _, c, h, w = v.shape
        if c != self.spec.in_channels:
            raise F.ShapeError(f"attention condenser expects {self.spec.in_channels} channels, got {c}")
        if h % f or w % f:
            raise ValueError(f"spatial size {h}x{w} not divisible by condense_factor {f}")
        q = F.maxpool2d(v, f, f)
        e = self.expand(self.mix(self.embed(q, training), training), training)
        return F.nearest_upsample(e, f)

    def forward(self, v, training=False):
        a = self.attention_logits(v, training)
        c = self.spec.in_channels
        return v * F.sigmoid(a) * self.scale.reshape(1, c, 1, 1)


# -- PEPE block ---------------------------------------------------------------------
@dataclass(frozen=True)
class PepeBlockSpec:
    in_channels: int
    proj1_channels: int
    proj2_channels: int
    expand_channels: int
    dw_kernel: int = 3
    stride: int = 1
    use_residual: bool = False

    def validate(self) -> None:
        """Structural checks every block must pass."""
        for field in ("in_channels", "proj1_channels", "proj2_channels", "expand_channels",
                      "dw_kernel", "stride"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")
        if self.use_residual and (self.in_channels != self.expand_channels or self.stride != 1):
            raise ValueError(
                "residual requires in_channels == expand_channels and stride == 1, got "
                f"{self.in_channels}->{self.expand_channels}, stride {self.stride}"
            )

    def validate_projections(self) -> None:
        """The projections must actually shrink the representation."""
        if self.proj1_channels >= self.in_channels:
            raise ValueError(
                f"proj1_channels {self.proj1_channels} must be < in_channels {self.in_channels}"
            )
        if self.proj2_channels >= self.expand_channels:
            raise ValueError(
                f"proj2_channels {self.proj2_channels} must be < expand_channels {self.expand_channels}"
            )


class PepeBlock(Module):
    """Projection, depthwise, projection, expansion with an optional residual.

    Stages: 1x1 (C -> p1), kxk depthwise with stride, 1x1 (p1 -> p2),
    1x1 (p2 -> expand). Each stage is followed by batchnorm; all but the last
    also by ReLU.
    """

    def __init__(self, spec: PepeBlockSpec, rng: np.random.Generator | None = None):
        super().__init__()
        spec.validate()
        self.spec = spec
        s = spec
        self.project1 = self.add_module("project1", ConvUnit(s.in_channels, s.proj1_channels, 1, rng=rng))
        self.depthwise = self.add_module(
            "depthwise",
            ConvUnit(s.proj1_channels, s.proj1_channels, s.dw_kernel, stride=s.stride,
                     groups=s.proj1_channels, rng=rng),
        )
        self.project2 = self.add_module("project2", ConvUnit(s.proj1_channels, s.proj2_channels, 1, rng=rng))
        self.expand = self.add_module(
            "expand", ConvUnit(s.proj2_channels, s.expand_channels, 1, act=False, rng=rng)
        )

    def forward(self, x, training=False):
        y = self.project1(x, training)
        y = self.depthwise(y, training)
        y = self.project2(y, training)
        y = self.expand(y, training)
        if self.spec.use_residual:
            if y.shape != x.shape:
                raise F.ShapeError(f"residual shape mismatch {x.shape} vs {y.shape}")
            y = y + x
        return y
