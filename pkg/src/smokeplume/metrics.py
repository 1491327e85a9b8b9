"""Evaluation quantities: confusion counts, accuracy, IoU, segmentation-area
statistics, and gradient-based per-band attribution.

Image-level decisions threshold the logit at zero (sigma(z) > 0.5).  IoU is
undefined (``None``) for an empty ground-truth mask and such images are
excluded from per-image averages; a segmentation counts as an image-level
positive if it predicts at least one smoke pixel.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

from . import catalog
from .augment import TransformPolicy
from .bands import BAND_NAMES
from .errors import (EmptyEvaluation, LengthMismatch, MaskNotBinary,
                     ShapeMismatch)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            v = getattr(self, name)
            if v < 0 or v != int(v):
                raise ValueError(f"{name} must be a non-negative integer, got {v}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def as_dict(self) -> dict:
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


@dataclass
class MetricsReport:
    """Full evaluation report; fields not produced by a given task stay None."""

    confusion: ConfusionCounts | None = None
    accuracy: float | None = None
    iou_per_image_mean: float | None = None
    iou_global: float | None = None
    area_recall_mean: float | None = None
    area_ratio_mean: float | None = None
    channel_importance: list[float] | None = None

    def to_json(self, indent: int = 2) -> str:
        doc = {
            "confusion": self.confusion.as_dict() if self.confusion else None,
            "accuracy": self.accuracy,
            "iou_per_image_mean": self.iou_per_image_mean,
            "iou_global": self.iou_global,
            "area_recall_mean": self.area_recall_mean,
            "area_ratio_mean": self.area_ratio_mean,
            "channel_importance": self.channel_importance,
        }
        return json.dumps(doc, indent=indent, sort_keys=True)

    def write_json(self, path: Path | str) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        conf = doc.get("confusion")
        return cls(
            confusion=ConfusionCounts(**conf) if conf else None,
            accuracy=doc.get("accuracy"),
            iou_per_image_mean=doc.get("iou_per_image_mean"),
            iou_global=doc.get("iou_global"),
            area_recall_mean=doc.get("area_recall_mean"),
            area_ratio_mean=doc.get("area_ratio_mean"),
            channel_importance=doc.get("channel_importance"),
        )


def confusion(predictions: Sequence[int], labels: Sequence[int]) -> ConfusionCounts:
    """Tally TP/TN/FP/FN for binary predictions against binary labels."""
    if len(predictions) != len(labels):
        raise LengthMismatch(
            f"{len(predictions)} predictions vs {len(labels)} labels"
        )
    if len(predictions) == 0:
        raise EmptyEvaluation("no samples to tally")
    tp = tn = fp = fn = 0
    for p, y in zip(predictions, labels):
        if p not in (0, 1) or y not in (0, 1):
            raise ValueError(f"predictions and labels must be 0 or 1, got ({p}, {y})")
        if p == 1 and y == 1:
            tp += 1
        elif p == 0 and y == 0:
            tn += 1
        elif p == 1:
            fp += 1
        else:
            fn += 1
    return ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise EmptyEvaluation("confusion counts are all zero")
    return (c.tp + c.tn) / c.total


def _check_binary_mask(arr: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if not np.isin(arr, (0, 1)).all():
        raise MaskNotBinary(f"{name} mask contains values outside {{0, 1}}")
    return arr.astype(bool)


def iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float | None:
    """Intersection over union; ``None`` (undefined) when ground truth is empty."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    pred = _check_binary_mask(pred, "prediction")
    gt = _check_binary_mask(gt, "ground truth")
    gt_area = int(gt.sum())
    if gt_area == 0:
        return None
    inter = int((pred & gt).sum())
    union = int((pred | gt).sum())
    return inter / union


def segmentation_metrics_from_masks(
    pairs: Iterable[tuple[np.ndarray, np.ndarray]],
) -> MetricsReport:
    """Aggregate segmentation metrics from (predicted, ground-truth) mask pairs.

    Pure counterpart of evaluate_segmentation once masks are in hand: any-smoke
    confusion/accuracy, per-image-mean and global-pixel IoU, and the two area
    statistics over images whose ground truth contains smoke.
    """
    preds: list[int] = []
    labels: list[int] = []
    ious: list[float] = []
    recalls: list[float] = []
    ratios: list[float] = []
    inter_total = 0
    union_total = 0
    for pred_arr, gt_arr in pairs:
        pred_arr = np.asarray(pred_arr)
        gt_arr = np.asarray(gt_arr)
        if pred_arr.shape != gt_arr.shape:
            raise ShapeMismatch(f"prediction {pred_arr.shape} vs ground truth {gt_arr.shape}")
        pred = _check_binary_mask(pred_arr, "prediction")
        gt = _check_binary_mask(gt_arr, "ground truth")
        pred_area = int(pred.sum())
        gt_area = int(gt.sum())
        preds.append(1 if pred_area > 0 else 0)
        labels.append(1 if gt_area > 0 else 0)
        inter = int((pred & gt).sum())
        union = int((pred | gt).sum())
        inter_total += inter
        union_total += union
        if gt_area > 0:
            ious.append(inter / union)
            recalls.append(inter / gt_area)
            ratios.append(pred_area / gt_area)
    if not preds:
        raise EmptyEvaluation("no mask pairs to evaluate")
    conf = confusion(preds, labels)
    return MetricsReport(
        confusion=conf,
        accuracy=accuracy(conf),
        iou_per_image_mean=float(np.mean(ious)) if ious else None,
        iou_global=inter_total / union_total if union_total > 0 else None,
        area_recall_mean=float(np.mean(recalls)) if recalls else None,
        area_ratio_mean=float(np.mean(ratios)) if ratios else None,
    )


def _eval_batches(model: torch.nn.Module, records, policy: TransformPolicy,
                  batch_size: int, target: str) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for xb, yb in catalog.batches(records, batch_size, policy,
                                          seed=0, target=target, shuffle=False):
                yield model(xb), yb
    finally:
        model.train(was_training)


def evaluate_classification(model: torch.nn.Module, records,
                            policy: TransformPolicy | None = None,
                            batch_size: int = 32) -> MetricsReport:
    """Image-level confusion and accuracy of a classifier at logit > 0."""
    if not records:
        raise EmptyEvaluation("no records to evaluate")
    policy = policy or TransformPolicy.eval()
    preds: list[int] = []
    labels: list[int] = []
    for logits, yb in _eval_batches(model, records, policy, batch_size, "label"):
        preds.extend(int(z > 0) for z in logits.reshape(-1).tolist())
        labels.extend(int(round(y)) for y in yb.reshape(-1).tolist())
    conf = confusion(preds, labels)
    return MetricsReport(confusion=conf, accuracy=accuracy(conf))


def evaluate_segmentation(model: torch.nn.Module, records,
                          policy: TransformPolicy | None = None,
                          batch_size: int = 16) -> MetricsReport:
    """Segmentation metrics for a pixel-logit model over mask-bearing records."""
    if not records:
        raise EmptyEvaluation("no records to evaluate")
    policy = policy or TransformPolicy.eval()

    def mask_pairs():
        for logits, mb in _eval_batches(model, records, policy, batch_size, "mask"):
            pred = (logits[:, 0] > 0).numpy().astype(np.uint8)
            gt = mb[:, 0].numpy().astype(np.uint8)
            for i in range(pred.shape[0]):
                yield pred[i], gt[i]

    return segmentation_metrics_from_masks(mask_pairs())


def channel_gradient_importance(model: torch.nn.Module, samples) -> np.ndarray:
    """Mean absolute first-convolution weight gradient per input channel.

    For each sample the image-level BCE loss is backpropagated, the absolute
    gradients of the first convolution's weights are summed within each input
    channel, and the per-channel means over all samples are normalized to
    sum 1.  ``samples`` may be catalog records, one ``(images, labels)`` tensor
    pair, or an iterable of such pairs.

    Gradients are accumulated on a double-precision copy of the model: a
    well-fit classifier drives losses small enough that single precision
    underflows to exactly zero gradients, which would erase the pattern.
    """
    import copy

    from .training import bce_with_logits

    if not hasattr(model, "conv1") or not hasattr(model.conv1, "weight"):
        raise ValueError("model does not expose a first convolution as .conv1")

    m = copy.deepcopy(model).double().eval()
    conv1 = m.conv1
    n_channels = conv1.weight.shape[1]
    totals = torch.zeros(n_channels, dtype=torch.float64)
    count = 0
    for xb, yb in _as_tensor_batches(samples):
        xb = xb.double()
        yb = yb.reshape(-1).double()
        for i in range(xb.shape[0]):
            m.zero_grad(set_to_none=True)
            logit = m(xb[i : i + 1]).reshape(())
            loss = bce_with_logits(logit, yb[i])
            loss.backward()
            totals += conv1.weight.grad.abs().sum(dim=(0, 2, 3))
            count += 1
    if count == 0:
        raise EmptyEvaluation("no samples for attribution")
    means = (totals / count).numpy()
    norm = means.sum()
    if norm == 0.0:
        return np.zeros(n_channels)
    return means / norm


def _as_tensor_batches(samples) -> Iterable[tuple[torch.Tensor, torch.Tensor]]:
    if isinstance(samples, tuple) and len(samples) == 2 and torch.is_tensor(samples[0]):
        return [samples]
    if isinstance(samples, (list, tuple)) and samples and isinstance(samples[0], catalog.SampleRecord):
        return catalog.batches(samples, batch_size=16, policy=TransformPolicy.eval(),
                               seed=0, target="label", shuffle=False)
    return samples


def ranked_channels(importance: np.ndarray) -> list[str]:
    """Band names sorted by descending importance (ties broken by band order)."""
    order = np.argsort(-np.asarray(importance), kind="stable")
    return [BAND_NAMES[i] for i in order]
