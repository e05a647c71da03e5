"""SGD-with-momentum training loop with best-on-validation model selection."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import DatasetManifest, PreprocessSpec, augment_batch, load_images
from .evaluate import evaluate_arrays
from .functional import softmax_cross_entropy
from .model import Network
from .tensor import Tensor

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    checkpoint_metric: str = "val_accuracy"
    augment: bool = True
    max_steps: int | None = None

    def validate(self) -> None:
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.checkpoint_metric not in ("val_accuracy", "val_sensitivity", "val_specificity"):
            raise ValueError(f"unknown checkpoint_metric {self.checkpoint_metric!r}")


def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean ``-log p(true class)`` from raw logits (log-sum-exp stabilised)."""
    return softmax_cross_entropy(logits, labels)


def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                      velocity: Sequence[np.ndarray], lr: float, momentum: float) -> None:
    """Classical momentum, in place: ``v = mu * v - lr * g``; ``w = w + v``."""
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError(f"{len(params)} params, {len(grads)} grads, {len(velocity)} velocities")
    for i, (w, g, v) in enumerate(zip(params, grads, velocity)):
        if not (w.shape == g.shape == v.shape):
            raise ValueError(f"parameter {i}: shapes {w.shape}, {g.shape}, {v.shape} disagree")
        lr_t, mu_t = w.dtype.type(lr), w.dtype.type(momentum)
        v *= mu_t
        v -= lr_t * g
        w += v


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum = lr, momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        live = [(p, v) for p, v in zip(self.params, self.velocity) if p.grad is not None]
        sgd_momentum_step([p.data for p, _ in live], [p.grad for p, _ in live],
                          [v for _, v in live], self.lr, self.momentum)


@dataclass
class TrainResult:
    model: Network
    history: list[dict]
    step_losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_metric: float = float("nan")


def _snapshot(model: Network) -> tuple[list[np.ndarray], list[np.ndarray]]:
    return ([p.data.copy() for p in model.parameters()],
            [b.copy() for _, b in model.named_buffers()])


def _restore(model: Network, state) -> None:
    params, buffers = state
    for p, a in zip(model.parameters(), params):
        p.data = a.copy()
    for (_, b), a in zip(model.named_buffers(), buffers):
        b[...] = a


def train(model: Network, manifest: DatasetManifest, config: TrainConfig = TrainConfig(),
          spec: PreprocessSpec | None = None, history_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None,
          on_step: Callable[[int, Network], None] | None = None) -> TrainResult:
    """Train ``model`` in place and leave it holding the best validation epoch.

    Each epoch shuffles the training split (seeded), drops the final partial
    batch, augments every sample with seed ``(seed, sample_index, epoch)``,
    and takes one SGD step per batch. Validation runs after every epoch; the
    state with the highest ``checkpoint_metric`` is kept, ties going to the
    earlier epoch. History records are also appended to ``history_path`` as
    JSON lines when given. ``on_step(step, model)`` runs after every update.
    """
    config.validate()
    train_recs, val_recs = manifest.subset("train"), manifest.subset("val")
    if not train_recs or not val_recs:
        raise ValueError("manifest needs non-empty 'train' and 'val' splits")
    spec = spec or PreprocessSpec(target_size=tuple(model.config.input_size))
    x_train = load_images(manifest, train_recs, spec)
    y_train = manifest.labels("train")
    x_val, y_val = load_images(manifest, val_recs, spec), manifest.labels("val")
    # index of each training sample in the full manifest, for per-sample seeds
    manifest_idx = np.array([i for i, r in enumerate(manifest.records) if r.split == "train"])

    opt = SGD(model.parameters(), config.learning_rate, config.momentum)
    history: list[dict] = []
    step_losses: list[float] = []
    best_state, best_value, best_epoch = None, -math.inf, 0
    history_fh = open(history_path, "w", encoding="utf-8") if history_path else None
    n_batches = len(x_train) // config.batch_size
    if n_batches == 0:
        raise ValueError(f"training split ({len(x_train)}) smaller than batch_size {config.batch_size}")
    steps = 0
    t0 = time.perf_counter()
    try:
        for epoch in range(1, config.epochs + 1):
            order = np.random.default_rng((config.seed, epoch)).permutation(len(x_train))
            epoch_losses = []
            for b in range(n_batches):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                xb = x_train[idx]
                if config.augment:
                    xb = augment_batch(xb, [(config.seed, int(manifest_idx[i]), epoch) for i in idx])
                loss = cross_entropy_loss(model.logits(xb, training=True), y_train[idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(epoch, b, value)
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_losses.append(value)
                step_losses.append(value)
                steps += 1
                if on_step is not None:
                    on_step(steps, model)
                if config.max_steps is not None and steps >= config.max_steps:
                    break

            ev = evaluate_arrays(model, x_val, y_val)
            record = {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)),
                "val_accuracy": ev.metrics["accuracy"],
                "val_sensitivity": ev.metrics["sensitivity"],
                "val_specificity": ev.metrics["specificity"],
                "wall_time_s": round(time.perf_counter() - t0, 3),
                "steps": steps,
            }
            history.append(record)
            if history_fh:
                history_fh.write(json.dumps(record) + "\n")
                history_fh.flush()
            logger.info("epoch %d loss %.4f val_acc %.4f", epoch, record["train_loss"], record["val_accuracy"])

            value = record[config.checkpoint_metric]
            value = -math.inf if value is None else value
            if value > best_value:
                best_value, best_epoch, best_state = value, epoch, _snapshot(model)
                if checkpoint_path is not None:
                    from .checkpoint import save_checkpoint
                    save_checkpoint(model, checkpoint_path)
            if config.max_steps is not None and steps >= config.max_steps:
                break
    finally:
        if history_fh:
            history_fh.close()

    _restore(model, best_state)
    return TrainResult(model, history, step_losses, best_epoch, best_value)
