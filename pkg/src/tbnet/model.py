"""Declarative network configuration and model assembly."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from . import functional as F
from .nn import (
    AttentionCondenser,
    AttentionCondenserSpec,
    ConvUnit,
    Linear,
    Module,
    PepeBlock,
    PepeBlockSpec,
)
from .tensor import Tensor, as_tensor, no_grad

BLOCK_TYPES = ("conv", "pepe", "attention_condenser")
HEAD = ("gap", "dense", "softmax")
MAX_PARAMS = 5_000_000


class ConfigError(ValueError):
    """A NetworkConfig breaks one of the family's rules; ``rule`` names it."""

    def __init__(self, rule: str, message: str):
        super().__init__(f"[{rule}] {message}")
        self.rule = rule


@dataclass
class StemSpec:
    channels: int = 32
    kernel: int = 3
    stride: int = 2


@dataclass
class StageSpec:
    """One stage of identical blocks.

    Only the fields relevant to ``type`` are read. ``stride`` applies to the
    first repeat. PEPE projections are given either as absolute widths
    (``proj1``/``proj2``) or as a ``bottleneck`` ratio of the stage width.
    Condenser embeddings likewise use ``embed_channels`` or ``embed_ratio``.
    """

    type: str
    channels: int
    repeat: int = 1
    stride: int = 1
    kernel: int = 3
    groups: int = 1
    proj1: int | None = None
    proj2: int | None = None
    bottleneck: float = 0.25
    residual: bool = True
    condense_factor: int = 2
    embed_channels: int | None = None
    embed_ratio: float = 0.25
    embed_groups: int = 1
    scale_init: float = 1.0


@dataclass
class NetworkConfig:
    stages: list[StageSpec]
    stem: StemSpec = field(default_factory=StemSpec)
    head: list[str] = field(default_factory=lambda: list(HEAD))
    input_size: tuple[int, int] = (224, 224)
    in_channels: int = 1
    num_classes: int = 2
    name: str = "tbnet"
    version: int = 1

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "NetworkConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError("schema", f"unknown config keys {sorted(unknown)}")
        if "stages" not in d:
            raise ConfigError("schema", "config needs a 'stages' list")
        stage_keys = {f.name for f in fields(StageSpec)}
        stages = []
        for i, s in enumerate(d["stages"]):
            bad = set(s) - stage_keys
            if bad:
                raise ConfigError("schema", f"stage {i}: unknown keys {sorted(bad)}")
            stages.append(StageSpec(**s))
        d["stages"] = stages
        if "stem" in d:
            d["stem"] = StemSpec(**d["stem"])
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        if "head" in d:
            d["head"] = list(d["head"])
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def copy(self) -> "NetworkConfig":
        return copy.deepcopy(self)


def load_config(path: str | Path) -> NetworkConfig:
    with open(path, encoding="utf-8") as fh:
        return NetworkConfig.from_dict(json.load(fh))


def save_config(config: NetworkConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def reference_config() -> NetworkConfig:
    """The tuned reference member of the family (see ``configs/reference.json``)."""
    text = resources.files("tbnet.configs").joinpath("reference.json").read_text(encoding="utf-8")
    return NetworkConfig.from_dict(json.loads(text))


# -- resolution into concrete blocks ------------------------------------------------
@dataclass(frozen=True)
class ConvBlockSpec:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    groups: int


@dataclass(frozen=True)
class ResolvedBlock:
    name: str
    spec: ConvBlockSpec | PepeBlockSpec | AttentionCondenserSpec
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]


def resolve(config: NetworkConfig) -> list[ResolvedBlock]:
    """Expand stages into per-block specs and validate every family rule.

    Raises :class:`ConfigError` naming the violated rule.
    """
    if list(config.head) != list(HEAD):
        raise ConfigError("head", f"head must be exactly {list(HEAD)}, got {list(config.head)}")
    if config.num_classes != 2:
        raise ConfigError("binary", f"num_classes must be 2, got {config.num_classes}")
    if config.in_channels < 1:
        raise ConfigError("input", "in_channels must be >= 1")
    h, w = config.input_size
    if h < 1 or w < 1:
        raise ConfigError("input", f"input_size must be positive, got {config.input_size}")
    if not config.stages:
        raise ConfigError("stages", "at least one stage is required")

    stem = config.stem
    _check_kernel(stem.kernel, "stem")
    if stem.channels < 1 or stem.stride < 1:
        raise ConfigError("stem", "stem channels and stride must be >= 1")
    blocks: list[ResolvedBlock] = []
    ho, wo = (F.conv_output_size(h, stem.kernel, stem.stride, stem.kernel // 2),
              F.conv_output_size(w, stem.kernel, stem.stride, stem.kernel // 2))
    blocks.append(ResolvedBlock(
        "stem", ConvBlockSpec(config.in_channels, stem.channels, stem.kernel, stem.stride, 1),
        (h, w), (ho, wo)))
    c, hw = stem.channels, (ho, wo)

    for si, st in enumerate(config.stages):
        where = f"stage {si}"
        if st.type not in BLOCK_TYPES:
            raise ConfigError("block_type", f"{where}: type {st.type!r} not in {BLOCK_TYPES}")
        if st.repeat < 1 or st.channels < 1 or st.stride < 1:
            raise ConfigError("stage", f"{where}: repeat, channels and stride must be >= 1")
        for r in range(st.repeat):
            name = f"stages.{si}.{r}"
            stride = st.stride if r == 0 else 1
            if st.type == "conv":
                _check_kernel(st.kernel, where)
                if c % st.groups or st.channels % st.groups:
                    raise ConfigError("groups", f"{where}: groups {st.groups} must divide {c} and {st.channels}")
                spec = ConvBlockSpec(c, st.channels, st.kernel, stride, st.groups)
                out_hw = tuple(F.conv_output_size(n, st.kernel, stride, st.kernel // 2) for n in hw)
            elif st.type == "pepe":
                _check_kernel(st.kernel, where)
                p1 = st.proj1 if st.proj1 is not None else max(1, int(round(c * st.bottleneck)))
                p2 = st.proj2 if st.proj2 is not None else max(1, int(round(st.channels * st.bottleneck)))
                residual = st.residual and c == st.channels and stride == 1
                spec = PepeBlockSpec(c, p1, p2, st.channels, st.kernel, stride, residual)
                try:
                    spec.validate()
                    spec.validate_projections()
                except ValueError as exc:
                    raise ConfigError("pepe_projection", f"{where}: {exc}") from None
                out_hw = tuple(F.conv_output_size(n, st.kernel, stride, st.kernel // 2) for n in hw)
            else:
                if st.channels != c:
                    raise ConfigError("condenser_channels",
                                      f"{where}: attention condenser keeps width {c}, got channels {st.channels}")
                if stride != 1:
                    raise ConfigError("condenser_stride", f"{where}: attention condenser stride must be 1")
                e = st.embed_channels if st.embed_channels is not None else max(1, int(round(c * st.embed_ratio)))
                spec = AttentionCondenserSpec(c, st.condense_factor, e, st.embed_groups, st.scale_init)
                try:
                    spec.validate()
                except ValueError as exc:
                    raise ConfigError("condenser_spec", f"{where}: {exc}") from None
                if hw[0] % st.condense_factor or hw[1] % st.condense_factor:
                    raise ConfigError("condense_divisibility",
                                      f"{where}: spatial size {hw[0]}x{hw[1]} not divisible by "
                                      f"condense_factor {st.condense_factor}")
                out_hw = hw
            if out_hw[0] < 1 or out_hw[1] < 1:
                raise ConfigError("spatial", f"{where}: spatial size collapses to {out_hw}")
            blocks.append(ResolvedBlock(name, spec, hw, out_hw))
            c, hw = st.channels, out_hw
    return blocks


def _check_kernel(k: int, where: str) -> None:
    if k < 1 or k % 2 == 0:
        raise ConfigError("kernel", f"{where}: kernel must be odd and >= 1, got {k}")


def final_channels(config: NetworkConfig) -> int:
    return config.stages[-1].channels


# -- the network ------------------------------------------------------------------------
class Network(Module):
    """Stem, stages, then global average pooling, dense and softmax."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.blocks: list[Module] = []
        for rb in resolve(config):
            spec = rb.spec
            if isinstance(spec, ConvBlockSpec):
                mod = ConvUnit(spec.in_channels, spec.out_channels, spec.kernel, spec.stride,
                               spec.groups, rng=rng)
            elif isinstance(spec, PepeBlockSpec):
                mod = PepeBlock(spec, rng=rng)
            else:
                mod = AttentionCondenser(spec, rng=rng)
            self.blocks.append(self.add_module(rb.name, mod))
        self.classifier = self.add_module("head.dense", Linear(final_channels(config), config.num_classes, rng=rng))

    def logits(self, x, training: bool = False) -> Tensor:
        x = as_tensor(x, like=self.classifier.weight)
        expected = (self.config.in_channels, *self.config.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise F.ShapeError(f"model expects input of shape (N, {', '.join(map(str, expected))}), got {x.shape}")
        for block in self.blocks:
            x = block(x, training)
        return self.classifier(F.global_avg_pool(x), training)

    def forward(self, x, training=False):
        return F.softmax(self.logits(x, training))

    def predict_proba(self, x) -> np.ndarray:
        """Inference-mode class probabilities as a plain array (no graph)."""
        with no_grad():
            return self.forward(x, training=False).data


Model = Network


def build_network(config: NetworkConfig, seed: int = 0, max_params: int | None = MAX_PARAMS) -> Network:
    """Build and initialize a network deterministically from ``seed``.

    Conv weights are He-normal on fan-in, biases zero, batchnorm scale one.
    ``max_params`` enforces the family's parameter budget (``None`` disables it).
    """
    from .complexity import count_complexity

    if max_params is not None:
        total = count_complexity(config).total_params
        if total > max_params:
            raise ConfigError("max_params", f"config has {total} parameters, budget is {max_params}")
    return Network(config, np.random.default_rng(seed))
