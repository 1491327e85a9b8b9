"""Loss, optimizer, and the two training loops with best-epoch selection.

Determinism contract: a run is fully determined by its TrainConfig seed.
Class balancing, parameter initialization, and the batch stream each use a
sub-seed drawn once from the config seed, and every epoch replays the same
seeded shuffle and augmentation stream — so with a zero learning rate the
logged loss is exactly constant, and identical configs produce identical
logs up to the wall-clock field.
"""

import copy
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import catalog, metrics
from .augment import TransformPolicy
from .errors import ConfigError, InvalidTarget, ShapeMismatch, TrainingDiverged
from .models import (ClassifierConfig, ModelCheckpoint, SegmenterConfig,
                     build_classifier, build_manifest, build_segmenter)

SELECTION_METRICS = ("val_accuracy", "val_iou")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 10
    seed: int = 0
    selection_metric: str = "val_accuracy"

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigError(
                f"selection_metric must be one of {SELECTION_METRICS}, "
                f"got {self.selection_metric!r}"
            )


def bce_with_logits(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy from logits, evaluated in the numerically
    stable form y*softplus(-z) + (1-y)*softplus(z).

    This equals max(z, 0) - z*y + log(1 + exp(-|z|)) but, unlike that
    expression, autograd gives exactly sigmoid(z) - y everywhere -- the
    clamp/abs kinks at z = 0 would otherwise zero the gradient right where
    fresh batch-normalized models start."""
    z = torch.as_tensor(logits)
    y = torch.as_tensor(targets, dtype=z.dtype)
    if z.shape != y.shape:
        raise ShapeMismatch(f"logits {tuple(z.shape)} vs targets {tuple(y.shape)}")
    if not torch.all((y == 0) | (y == 1)):
        raise InvalidTarget("targets must be 0 or 1")
    loss = y * F.softplus(-z) + (1 - y) * F.softplus(z)
    return loss.mean()


def sgd_momentum_step(weights, velocity, gradient, lr: float, momentum: float):
    """One momentum-SGD update: v' = mu*v + g, w' = w - lr*v'.  Pure; works
    elementwise on tensors, arrays, or scalars."""
    new_velocity = momentum * velocity + gradient
    new_weights = weights - lr * new_velocity
    return new_weights, new_velocity


class SGDMomentum:
    """Momentum-SGD over model parameters, applying sgd_momentum_step in place."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.momentum = momentum
        self.velocities = [torch.zeros_like(p) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    @torch.no_grad()
    def step(self) -> None:
        for p, v in zip(self.params, self.velocities):
            if p.grad is None:
                continue
            new_w, new_v = sgd_momentum_step(p, v, p.grad, self.lr, self.momentum)
            p.copy_(new_w)
            v.copy_(new_v)


# --- training logs ---

LOG_FIELDS = ("epoch", "train_loss", "val_metric", "wall_seconds")


def format_log_entry(entry: dict) -> str:
    return (f"epoch={entry['epoch']} train_loss={entry['train_loss']:.6f} "
            f"val_metric={entry['val_metric']:.6f} "
            f"wall_seconds={entry['wall_seconds']:.3f}")


def write_training_log(log: list[dict], path: Path | str) -> None:
    text = "".join(format_log_entry(e) + "\n" for e in log)
    Path(path).write_text(text, encoding="utf-8")


def parse_training_log(path: Path | str) -> list[dict]:
    entries = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        kv = dict(part.split("=", 1) for part in line.split())
        entries.append({
            "epoch": int(kv["epoch"]),
            "train_loss": float(kv["train_loss"]),
            "val_metric": float(kv["val_metric"]),
            "wall_seconds": float(kv["wall_seconds"]),
        })
    return entries


# --- shared loop machinery ---


def _split_records(records, split: str, training: bool):
    out = [r for r in records if r.split == split]
    if training:
        out = [r for r in out if not r.flagged]
    return out


def _run_epochs(model, balanced_records, val_records, cfg: TrainConfig,
                policy: TransformPolicy, stream_seed: int, target: str,
                val_fn) -> tuple[dict, list[dict]]:
    """Epoch loop shared by both trainers: train, validate, track best epoch."""
    opt = SGDMomentum(model.parameters(), cfg.learning_rate, cfg.momentum)
    log: list[dict] = []
    best = {"metric": -float("inf"), "epoch": -1, "state": None, "step": 0}
    step = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        model.train()
        losses = []
        for xb, yb in catalog.batches(balanced_records, cfg.batch_size, policy,
                                      seed=stream_seed, target=target, shuffle=True):
            logits = model(xb)
            if target == "label":
                logits = logits.reshape(-1)
            loss = bce_with_logits(logits, yb)
            if not torch.isfinite(loss):
                raise TrainingDiverged(epoch, log=log)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            losses.append(float(loss.detach()))
        val_metric = val_fn(model, val_records)
        log.append({
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "val_metric": float(val_metric),
            "wall_seconds": time.perf_counter() - t0,
        })
        # Ties keep the earliest epoch: once validation plateaus, extra epochs
        # only push logits into saturation without improving the metric.
        if val_metric > best["metric"]:
            best.update(metric=float(val_metric), epoch=epoch, step=step,
                        state=copy.deepcopy(model.state_dict()))
    model.load_state_dict(best["state"])
    return best, log


def _sub_seeds(seed: int, n: int = 3) -> list[int]:
    rng = np.random.default_rng(seed)
    return [int(rng.integers(2**31)) for _ in range(n)]


def train_classifier(records, cfg: TrainConfig,
                     model_cfg: ClassifierConfig | None = None,
                     policy: TransformPolicy | None = None
                     ) -> tuple[ModelCheckpoint, list[dict]]:
    """Train the scalar-logit classifier on the train split with duplicated
    minority class and augmentation; select the best val-accuracy epoch."""
    if cfg.selection_metric != "val_accuracy":
        raise ConfigError("classifier training selects on val_accuracy")
    train_records = _split_records(records, "train", training=True)
    val_records = _split_records(records, "val", training=False)
    if not train_records:
        raise ConfigError("no train-split records")
    if not val_records:
        raise ConfigError("no val-split records")

    balance_seed, stream_seed, init_seed = _sub_seeds(cfg.seed)
    balanced = catalog.balance_by_duplication(train_records, seed=balance_seed)
    model = build_classifier(model_cfg or ClassifierConfig(), seed=init_seed)
    policy = policy or TransformPolicy.train()
    eval_policy = TransformPolicy.eval(policy.crop_size)

    def val_accuracy(m, recs):
        return metrics.evaluate_classification(m, recs, eval_policy, cfg.batch_size).accuracy

    best, log = _run_epochs(model, balanced, val_records, cfg, policy,
                            stream_seed, "label", val_accuracy)
    manifest = build_manifest(
        "classifier", model.cfg, training_step=best["step"],
        metrics={"selection_metric": cfg.selection_metric,
                 "value": best["metric"], "epoch": best["epoch"]})
    return ModelCheckpoint.from_model(model, manifest), log


def segmentation_subset(records, split: str, seed: int = 0,
                        training: bool = False):
    """Masked positives of a split plus an equal count of negatives (whose
    all-zero masks the batch assembler supplies); seeded negative choice."""
    pool = _split_records(records, split, training=training)
    positives = [r for r in pool if r.label == 1 and r.mask_path is not None]
    negatives = [r for r in pool if r.label == 0]
    rng = np.random.default_rng(seed)
    take = min(len(positives), len(negatives))
    chosen = sorted(rng.choice(len(negatives), size=take, replace=False).tolist())
    return positives + [negatives[i] for i in chosen]


def train_segmenter(records, cfg: TrainConfig,
                    model_cfg: SegmenterConfig | None = None,
                    policy: TransformPolicy | None = None
                    ) -> tuple[ModelCheckpoint, list[dict]]:
    """Train the per-pixel segmenter on masked positives plus count-matched
    negatives; select the best epoch by val IoU (excluding empty-ground-truth
    images), falling back to any-smoke accuracy when no val image has smoke."""
    balance_seed, stream_seed, init_seed = _sub_seeds(cfg.seed)
    train_subset = segmentation_subset(records, "train", balance_seed, training=True)
    val_subset = segmentation_subset(records, "val", balance_seed, training=False)
    if not any(r.label == 1 for r in train_subset):
        raise ConfigError("train split has no masked positive records")
    if not val_subset:
        val_subset = _split_records(records, "val", training=False)
    if not val_subset:
        raise ConfigError("no val-split records")

    model = build_segmenter(model_cfg or SegmenterConfig(), seed=init_seed)
    policy = policy or TransformPolicy.train()
    eval_policy = TransformPolicy.eval(policy.crop_size)

    def val_metric(m, recs):
        report = metrics.evaluate_segmentation(m, recs, eval_policy, cfg.batch_size)
        if cfg.selection_metric == "val_iou" and report.iou_per_image_mean is not None:
            return report.iou_per_image_mean
        return report.accuracy

    best, log = _run_epochs(model, train_subset, val_subset, cfg, policy,
                            stream_seed, "mask", val_metric)
    manifest = build_manifest(
        "segmenter", model.cfg, training_step=best["step"],
        metrics={"selection_metric": cfg.selection_metric,
                 "value": best["metric"], "epoch": best["epoch"]})
    return ModelCheckpoint.from_model(model, manifest), log
