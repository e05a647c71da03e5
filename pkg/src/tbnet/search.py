"""Constrained architecture search over the network family.

Candidates are generated by seeded sampling of a declarative space, screened
statically against the parameter budget, scored by a pluggable evaluator,
and ranked by a NetScore-style universal performance function among those
passing every indicator constraint.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .complexity import count_complexity
from .model import ConfigError, NetworkConfig, StageSpec, StemSpec

logger = logging.getLogger(__name__)

EvaluatorFn = Callable[[NetworkConfig], tuple[float, float, float]]
ENUMERATION_LIMIT = 20_000


@dataclass(frozen=True)
class IndicatorConstraints:
    min_sensitivity: float = 0.95
    min_specificity: float = 0.95
    max_params: int = 5_000_000


@dataclass(frozen=True)
class ScoreCoefficients:
    alpha: float = 2.0
    beta: float = 0.5
    gamma: float = 0.5


def universal_performance(accuracy_pct: float, params_m: float, macs_m: float,
                          alpha: float = 2.0, beta: float = 0.5, gamma: float = 0.5) -> float:
    """``20 * log10(a**alpha / (p**beta * m**gamma))``.

    ``accuracy_pct`` is in percent, ``params_m`` in millions of parameters and
    ``macs_m`` in millions of MACs. Zero accuracy scores ``-inf``.
    """
    if params_m <= 0 or macs_m <= 0:
        raise ValueError(f"params and MACs must be positive, got {params_m}, {macs_m}")
    if accuracy_pct < 0:
        raise ValueError(f"accuracy must be >= 0, got {accuracy_pct}")
    if accuracy_pct == 0:
        return -math.inf
    return 20.0 * (alpha * math.log10(accuracy_pct) - beta * math.log10(params_m) - gamma * math.log10(macs_m))


def indicator(result, constraints: IndicatorConstraints = IndicatorConstraints()) -> int:
    """1 when sensitivity, specificity and parameter count all satisfy the (inclusive) bounds."""
    sens, spec, params = result.sensitivity, result.specificity, result.params
    if sens is None or spec is None:
        return 0
    ok = (sens >= constraints.min_sensitivity and spec >= constraints.min_specificity
          and params <= constraints.max_params)
    return int(ok)


@dataclass
class CandidateResult:
    config: NetworkConfig
    params: int
    macs: int
    sensitivity: float | None = None
    specificity: float | None = None
    accuracy: float | None = None
    u_score: float = -math.inf
    feasible: bool = False
    evaluated: bool = False

    @property
    def config_hash(self) -> str:
        return self.config.hash()


# -- search space -------------------------------------------------------------------
@dataclass
class SearchSpace:
    """Choices from which each stage of a candidate is drawn independently.

    Every stage downsamples by 2. A stage flagged for a condenser is followed
    by an attention condenser using the first ``condense_factors`` entry that
    divides the stage's spatial size (no condenser if none does). ``seeds``
    holds explicit seed architectures (config dicts) that are always
    evaluated in addition to the sampled ones.
    """

    stem_channels: list[int] = field(default_factory=lambda: [16, 24, 32])
    stage_counts: list[int] = field(default_factory=lambda: [4, 5])
    widths: list[int] = field(default_factory=lambda: [32, 64, 128, 256, 512])
    block_types: list[str] = field(default_factory=lambda: ["pepe", "conv"])
    repeats: list[int] = field(default_factory=lambda: [1, 2, 3])
    condenser: list[bool] = field(default_factory=lambda: [False, True])
    bottlenecks: list[float] = field(default_factory=lambda: [0.25, 0.5])
    condense_factors: list[int] = field(default_factory=lambda: [2, 7])
    embed_ratio: float = 0.25
    head_channels: list[int] = field(default_factory=lambda: [0])
    input_size: tuple[int, int] = (224, 224)
    seeds: list[dict] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown search space keys {sorted(bad)}")
        d = dict(d)
        if "input_size" in d:
            d["input_size"] = tuple(d["input_size"])
        return cls(**d)

    def _stage_choices(self) -> list[tuple]:
        # the bottleneck ratio only applies to PEPE stages
        out = []
        for btype in self.block_types:
            ratios = self.bottlenecks if btype == "pepe" else [None]
            out.extend((btype, *rest) for rest in itertools.product(self.widths, self.repeats,
                                                                     self.condenser, ratios))
        return out

    def size(self) -> int:
        per_stage = len(self._stage_choices())
        n = sum(per_stage ** k for k in self.stage_counts)
        return n * len(self.stem_channels) * len(self.head_channels)

    def enumerate(self) -> Iterator[NetworkConfig]:
        stage_choices = self._stage_choices()
        for stem in self.stem_channels:
            for k in self.stage_counts:
                for stages in itertools.product(stage_choices, repeat=k):
                    for head in self.head_channels:
                        yield self.make_config(stem, stages, head)

    def sample(self, rng: np.random.Generator) -> NetworkConfig:
        choices = self._stage_choices()
        stem = self.stem_channels[rng.integers(len(self.stem_channels))]
        k = self.stage_counts[rng.integers(len(self.stage_counts))]
        stages = [choices[rng.integers(len(choices))] for _ in range(k)]
        head = self.head_channels[rng.integers(len(self.head_channels))]
        return self.make_config(stem, stages, head)

    def make_config(self, stem: int, stages: Sequence[tuple], head_channels: int = 0) -> NetworkConfig:
        specs: list[StageSpec] = []
        # stem and every stage: kernel 3, padding 1, stride 2 -> ceil(n / 2)
        h, w = (self.input_size[0] + 1) // 2, (self.input_size[1] + 1) // 2
        for btype, width, repeat, cond, bottleneck in stages:
            if btype == "pepe":
                specs.append(StageSpec("pepe", width, repeat=repeat, stride=2, bottleneck=bottleneck))
            else:
                specs.append(StageSpec(btype, width, repeat=repeat, stride=2))
            h, w = (h + 1) // 2, (w + 1) // 2
            if cond:
                f = next((f for f in self.condense_factors if h % f == 0 and w % f == 0 and f <= min(h, w)), None)
                if f is not None:
                    specs.append(StageSpec("attention_condenser", width, condense_factor=f,
                                           embed_ratio=self.embed_ratio))
        if head_channels:
            specs.append(StageSpec("conv", head_channels, kernel=1))
        return NetworkConfig(stages=specs, stem=StemSpec(stem, 3, 2), input_size=tuple(self.input_size),
                             name="candidate")


def load_search_config(path: str | os.PathLike) -> tuple[SearchSpace, IndicatorConstraints, ScoreCoefficients]:
    """Read ``[space]``, ``[constraints]`` and ``[coefficients]`` from TOML or JSON."""
    path = Path(path)
    raw = path.read_bytes()
    doc = json.loads(raw) if path.suffix.lower() == ".json" else tomllib.loads(raw.decode("utf-8"))
    space = SearchSpace.from_dict(doc.get("space", {}))
    constraints = IndicatorConstraints(**doc.get("constraints", {}))
    coeffs = ScoreCoefficients(**doc.get("coefficients", {}))
    return space, constraints, coeffs


# -- search ------------------------------------------------------------------------
@dataclass
class SearchResult:
    ranked: list[CandidateResult]
    candidates: list[CandidateResult]
    warning: str | None = None

    @property
    def best(self) -> CandidateResult | None:
        if self.ranked:
            return self.ranked[0]
        return _best_infeasible(self.candidates)


def _rank_key(c: CandidateResult):
    return (-c.u_score, c.params, c.config_hash)


def _best_infeasible(cands: Sequence[CandidateResult]) -> CandidateResult | None:
    if not cands:
        return None
    evaluated = [c for c in cands if c.evaluated]
    if evaluated:
        return min(evaluated, key=_rank_key)
    return min(cands, key=lambda c: (c.params, c.config_hash))


def generate_candidates(space: SearchSpace, budget: int, rng: np.random.Generator) -> list[NetworkConfig]:
    """Up to ``budget`` distinct configs; seed architectures first."""
    out: list[NetworkConfig] = []
    seen: set[str] = set()

    def take(cfg: NetworkConfig) -> None:
        key = cfg.hash()
        if key not in seen and len(out) < budget:
            seen.add(key)
            out.append(cfg)

    for s in space.seeds:
        take(NetworkConfig.from_dict(s))
    if space.size() <= ENUMERATION_LIMIT:
        pool = list(space.enumerate())
        for i in rng.permutation(len(pool)):
            take(pool[i])
            if len(out) >= budget:
                break
    else:
        attempts = 0
        while len(out) < budget and attempts < 50 * budget:
            take(space.sample(rng))
            attempts += 1
    return out


def search(space: SearchSpace, budget: int, evaluator_fn: EvaluatorFn, seed: int = 0,
           constraints: IndicatorConstraints = IndicatorConstraints(),
           coefficients: ScoreCoefficients = ScoreCoefficients(),
           workers: int = 1) -> SearchResult:
    """Generate, screen, evaluate and rank up to ``budget`` candidates.

    Configs over ``constraints.max_params`` are rejected before
    ``evaluator_fn`` is called. ``evaluator_fn(config)`` returns
    ``(sensitivity, specificity, accuracy)`` as fractions. Feasible
    candidates are ranked by score (descending), ties broken by fewer
    parameters. With no feasible candidate, ``warning`` is set and
    :attr:`SearchResult.best` falls back to the best infeasible one.
    """
    if budget < 1:
        raise ValueError(f"budget must be >= 1, got {budget}")
    rng = np.random.default_rng(seed)
    configs = generate_candidates(space, budget, rng)
    cands: list[CandidateResult] = []
    for cfg in configs:
        try:
            rep = count_complexity(cfg)
        except ConfigError as exc:
            raise ConfigError(exc.rule, f"search space produced an invalid config: {exc}") from None
        cands.append(CandidateResult(cfg, rep.total_params, rep.total_macs))

    survivors = [c for c in cands if c.params <= constraints.max_params]
    logger.info("%d candidates, %d pass the parameter screen", len(cands), len(survivors))

    def run(c: CandidateResult) -> tuple[float, float, float]:
        return evaluator_fn(c.config)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = list(pool.map(run, survivors))
    else:
        scores = [run(c) for c in survivors]

    a, b, g = coefficients.alpha, coefficients.beta, coefficients.gamma
    for c, (sens, spec, acc) in zip(survivors, scores):
        c.sensitivity, c.specificity, c.accuracy = sens, spec, acc
        c.evaluated = True
        c.u_score = universal_performance(100.0 * (acc or 0.0), c.params / 1e6, max(c.macs, 1) / 1e6, a, b, g)
        c.feasible = bool(indicator(c, constraints))

    ranked = sorted((c for c in survivors if c.feasible), key=_rank_key)
    warning = None
    if not ranked:
        warning = "no candidate satisfies the indicator constraints; best infeasible candidate reported"
        logger.warning(warning)
    return SearchResult(ranked, cands, warning)


LEADERBOARD_COLUMNS = ("config_hash", "params", "macs", "sensitivity", "specificity",
                       "accuracy", "u_score", "feasible")


def write_leaderboard(result: SearchResult, path: str | os.PathLike) -> None:
    """CSV of every candidate: feasible ones in rank order, then the rest."""
    rest = sorted((c for c in result.candidates if not c.feasible),
                  key=lambda c: (not c.evaluated, *_rank_key(c)))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(LEADERBOARD_COLUMNS)
        for c in [*result.ranked, *rest]:
            w.writerow([c.config_hash, c.params, c.macs,
                        "" if c.sensitivity is None else f"{c.sensitivity:.6f}",
                        "" if c.specificity is None else f"{c.specificity:.6f}",
                        "" if c.accuracy is None else f"{c.accuracy:.6f}",
                        f"{c.u_score:.6f}", int(c.feasible)])


def training_evaluator(manifest, train_config, seed: int = 0) -> EvaluatorFn:
    """Evaluator that trains each candidate (typically for a few epochs) and scores the val split."""
    from .evaluate import evaluate
    from .model import build_network
    from .train import train

    def fn(config: NetworkConfig) -> tuple[float, float, float]:
        model = build_network(config, seed=seed, max_params=None)
        train(model, manifest, train_config)
        m = evaluate(model, manifest, "val").metrics
        return (m["sensitivity"] or 0.0, m["specificity"] or 0.0, m["accuracy"] or 0.0)

    return fn
