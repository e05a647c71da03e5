"""Closed-form parameter and multiply-accumulate accounting.

Conventions:

* conv params  = Co * (Ci/g) * kh * kw + Co (bias) + 2 * Co (batchnorm affine, when present)
* conv MACs    = H' * W' * Co * (Ci/g) * kh * kw
* dense params = Co * Ci + Co, MACs = Co * Ci
* pooling, upsampling, activations, batchnorm, gating and residual adds: 0 MACs
* an attention condenser's learned scale contributes C params, 0 MACs

Batchnorm running statistics are buffers, not parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import ConvBlockSpec, NetworkConfig, final_channels, resolve
from .nn import AttentionCondenserSpec, PepeBlockSpec


@dataclass(frozen=True)
class LayerComplexity:
    name: str
    kind: str
    params: int
    macs: int
    out_shape: tuple[int, ...]


@dataclass
class ComplexityReport:
    total_params: int
    total_macs: int
    layers: list[LayerComplexity] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "total_params": self.total_params,
            "total_macs": self.total_macs,
            "layers": [
                {"name": l.name, "kind": l.kind, "params": l.params, "macs": l.macs,
                 "out_shape": list(l.out_shape)}
                for l in self.layers
            ],
        }

    def table(self) -> str:
        rows = [f"{'layer':<36} {'kind':<10} {'params':>12} {'MACs':>16}  out"]
        for l in self.layers:
            shape = "x".join(map(str, l.out_shape))
            rows.append(f"{l.name:<36} {l.kind:<10} {l.params:>12,} {l.macs:>16,}  {shape}")
        rows.append(f"{'total':<36} {'':<10} {self.total_params:>12,} {self.total_macs:>16,}")
        rows.append(f"params: {self.total_params / 1e6:.2f}M   MACs: {self.total_macs / 1e9:.3f}G")
        return "\n".join(rows)


def conv_params(ci: int, co: int, k: int, groups: int = 1, bias: bool = True, bn: bool = True) -> int:
    return co * (ci // groups) * k * k + (co if bias else 0) + (2 * co if bn else 0)


def conv_macs(ci: int, co: int, k: int, out_h: int, out_w: int, groups: int = 1) -> int:
    return out_h * out_w * co * (ci // groups) * k * k


def dense_params(ci: int, co: int, bias: bool = True) -> int:
    return co * ci + (co if bias else 0)


def _conv(name, ci, co, k, groups, hw, bias=True, bn=True):
    return LayerComplexity(name, "conv", conv_params(ci, co, k, groups, bias, bn),
                           conv_macs(ci, co, k, hw[0], hw[1], groups), (co, *hw))


def pepe_layers(name: str, s: PepeBlockSpec, in_hw: tuple[int, int], out_hw: tuple[int, int]) -> list[LayerComplexity]:
    return [
        _conv(f"{name}.project1", s.in_channels, s.proj1_channels, 1, 1, in_hw),
        _conv(f"{name}.depthwise", s.proj1_channels, s.proj1_channels, s.dw_kernel, s.proj1_channels, out_hw),
        _conv(f"{name}.project2", s.proj1_channels, s.proj2_channels, 1, 1, out_hw),
        _conv(f"{name}.expand", s.proj2_channels, s.expand_channels, 1, 1, out_hw),
    ]


def condenser_layers(name: str, s: AttentionCondenserSpec, hw: tuple[int, int]) -> list[LayerComplexity]:
    c, e, f = s.in_channels, s.embed_channels, s.condense_factor
    q = (hw[0] // f, hw[1] // f)
    return [
        LayerComplexity(f"{name}.condense", "maxpool", 0, 0, (c, *q)),
        _conv(f"{name}.embed", c, e, 1, s.groups, q),
        _conv(f"{name}.mix", e, e, 3, e, q),
        _conv(f"{name}.expand", e, c, 1, 1, q, bn=False),
        LayerComplexity(f"{name}.upsample", "upsample", 0, 0, (c, *hw)),
        LayerComplexity(f"{name}.scale", "scale", c, 0, (c, *hw)),
    ]


def count_complexity(config: NetworkConfig) -> ComplexityReport:
    """Per-layer and total params/MACs for one 1 x C x H x W forward pass."""
    layers: list[LayerComplexity] = []
    for rb in resolve(config):
        s = rb.spec
        if isinstance(s, ConvBlockSpec):
            layers.append(_conv(rb.name, s.in_channels, s.out_channels, s.kernel, s.groups, rb.out_hw))
        elif isinstance(s, PepeBlockSpec):
            layers.extend(pepe_layers(rb.name, s, rb.in_hw, rb.out_hw))
        else:
            layers.extend(condenser_layers(rb.name, s, rb.in_hw))
    c = final_channels(config)
    k = config.num_classes
    layers.append(LayerComplexity("head.gap", "gap", 0, 0, (c,)))
    layers.append(LayerComplexity("head.dense", "dense", dense_params(c, k), c * k, (k,)))
    layers.append(LayerComplexity("head.softmax", "softmax", 0, 0, (k,)))
    return ComplexityReport(
        total_params=sum(l.params for l in layers),
        total_macs=sum(l.macs for l in layers),
        layers=layers,
    )
