"""Loss/optimizer math, log format, determinism, and the two training loops."""

import dataclasses

import numpy as np
import pytest
import torch
import torch.nn as nn

from smokeplume import metrics
from smokeplume.augment import TransformPolicy
from smokeplume.errors import (
    ConfigError,
    InvalidTarget,
    ShapeMismatch,
    TrainingDiverged,
)
from smokeplume.models import ClassifierConfig, SegmenterConfig
from smokeplume.training import (
    SGDMomentum,
    TrainConfig,
    bce_with_logits,
    format_log_entry,
    parse_training_log,
    sgd_momentum_step,
    segmentation_subset,
    train_classifier,
    train_segmenter,
    write_training_log,
)

torch.set_num_threads(2)


@pytest.fixture()
def stamped_records(dataset_records):
    """Copies of the session records with hand-assigned splits.

    First four of each class train, next two val, the rest test; the first
    positives carry masks, so train and val both hold masked positives.
    """
    records = [dataclasses.replace(r) for r in dataset_records]
    positives = [r for r in records if r.label == 1]
    negatives = [r for r in records if r.label == 0]
    for group in (positives, negatives):
        for i, rec in enumerate(group):
            rec.split = "train" if i < 4 else ("val" if i < 6 else "test")
    return records


# --- TrainConfig ---


def test_config_defaults_valid():
    cfg = TrainConfig()
    assert cfg.selection_metric == "val_accuracy"


def test_config_zero_learning_rate_allowed():
    assert TrainConfig(learning_rate=0.0).learning_rate == 0.0


@pytest.mark.parametrize("kwargs", [
    {"learning_rate": -0.1},
    {"momentum": 1.0},
    {"momentum": -0.2},
    {"batch_size": 0},
    {"max_epochs": 0},
    {"selection_metric": "f1"},
])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


# --- bce_with_logits ---


def test_bce_zero_logit_is_log_two():
    loss = bce_with_logits(torch.tensor(0.0), torch.tensor(1.0))
    assert float(loss) == pytest.approx(float(np.log(2.0)), rel=1e-6)


def test_bce_stable_at_extreme_logits():
    z = torch.tensor([100.0, -100.0, 100.0, -100.0])
    y = torch.tensor([1.0, 0.0, 0.0, 1.0])
    loss = bce_with_logits(z, y)
    assert torch.isfinite(loss)
    assert float(loss) == pytest.approx(50.0, rel=1e-6)  # two free, two 100s


def test_bce_matches_naive_formula():
    z = torch.linspace(-15, 15, 201, dtype=torch.float64)
    y = (torch.arange(201, dtype=torch.float64) % 2)
    naive = -(y * torch.log(torch.sigmoid(z))
              + (1 - y) * torch.log(1 - torch.sigmoid(z))).mean()
    assert float(bce_with_logits(z, y)) == pytest.approx(float(naive), abs=1e-9)


def test_bce_is_mean_of_elementwise_losses():
    z = torch.tensor([0.3, -1.2, 2.5], dtype=torch.float64)
    y = torch.tensor([1.0, 0.0, 1.0], dtype=torch.float64)
    per = [float(bce_with_logits(z[i : i + 1], y[i : i + 1])) for i in range(3)]
    assert float(bce_with_logits(z, y)) == pytest.approx(float(np.mean(per)), abs=1e-12)


def test_bce_rejects_fractional_targets():
    with pytest.raises(InvalidTarget):
        bce_with_logits(torch.tensor([0.0]), torch.tensor([0.5]))


def test_bce_rejects_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        bce_with_logits(torch.zeros(2, 1), torch.zeros(2))


def test_bce_analytic_gradient():
    z = torch.linspace(-4, 4, 9, dtype=torch.float64, requires_grad=True)
    y = torch.tensor([1.0, 0, 1, 0, 1, 0, 1, 0, 1], dtype=torch.float64)
    bce_with_logits(z, y).backward()
    expected = (torch.sigmoid(z.detach()) - y) / z.numel()
    torch.testing.assert_close(z.grad, expected, rtol=1e-12, atol=1e-12)


def test_bce_gradient_exact_at_zero_logit():
    # Fresh batch-normalized models emit exactly-zero logits on their first
    # step; the gradient there must be sigmoid(0) - y, not a kink artifact.
    for y_val, want in ((1.0, -0.5), (0.0, 0.5)):
        z = torch.tensor(0.0, dtype=torch.float64, requires_grad=True)
        bce_with_logits(z, torch.tensor(y_val, dtype=torch.float64)).backward()
        assert float(z.grad) == pytest.approx(want, abs=1e-12)


def test_bce_finite_difference_spot_check():
    z0, y = 0.7, torch.tensor(1.0, dtype=torch.float64)
    h = 1e-6
    up = float(bce_with_logits(torch.tensor(z0 + h, dtype=torch.float64), y))
    dn = float(bce_with_logits(torch.tensor(z0 - h, dtype=torch.float64), y))
    fd = (up - dn) / (2 * h)
    analytic = float(torch.sigmoid(torch.tensor(z0, dtype=torch.float64)) - 1.0)
    assert fd == pytest.approx(analytic, rel=1e-6)


# --- SGD with momentum ---


def test_sgd_step_hand_arithmetic():
    w, v = 0.0, 0.0
    w, v = sgd_momentum_step(w, v, 1.0, lr=0.1, momentum=0.9)
    assert (w, v) == (pytest.approx(-0.1), pytest.approx(1.0))
    w, v = sgd_momentum_step(w, v, 1.0, lr=0.1, momentum=0.9)
    assert (w, v) == (pytest.approx(-0.29), pytest.approx(1.9))


def test_sgd_step_linear_in_gradient_from_rest():
    w = np.array([1.0, -2.0])
    g = np.array([0.5, 0.25])
    w1, _ = sgd_momentum_step(w, np.zeros(2), g, lr=0.2, momentum=0.9)
    w3, _ = sgd_momentum_step(w, np.zeros(2), 3 * g, lr=0.2, momentum=0.9)
    np.testing.assert_allclose(w3 - w, 3 * (w1 - w))


def test_sgd_step_zero_lr_freezes_weights():
    w, v = sgd_momentum_step(5.0, 2.0, 3.0, lr=0.0, momentum=0.5)
    assert w == 5.0
    assert v == pytest.approx(4.0)  # velocity still integrates


def test_sgd_matches_torch_reference():
    torch.manual_seed(0)
    ours = nn.Linear(6, 1)
    theirs = nn.Linear(6, 1)
    theirs.load_state_dict(ours.state_dict())
    opt_a = SGDMomentum(ours.parameters(), lr=0.05, momentum=0.9)
    opt_b = torch.optim.SGD(theirs.parameters(), lr=0.05, momentum=0.9)
    x = torch.randn(16, 6)
    y = (x.sum(dim=1) > 0).float()
    for _ in range(12):
        opt_a.zero_grad()
        bce_with_logits(ours(x).reshape(-1), y).backward()
        opt_a.step()
        opt_b.zero_grad()
        bce_with_logits(theirs(x).reshape(-1), y).backward()
        opt_b.step()
    for pa, pb in zip(ours.parameters(), theirs.parameters()):
        torch.testing.assert_close(pa, pb, rtol=1e-6, atol=1e-7)


def test_sgd_optimizes_logistic_regression():
    torch.manual_seed(1)
    x = torch.randn(64, 4)
    y = (x @ torch.tensor([1.0, -2.0, 0.5, 1.5]) > 0).float()
    model = nn.Linear(4, 1)
    opt = SGDMomentum(model.parameters(), lr=0.1, momentum=0.9)
    with torch.no_grad():
        start = float(bce_with_logits(model(x).reshape(-1), y))
    for _ in range(50):
        opt.zero_grad()
        bce_with_logits(model(x).reshape(-1), y).backward()
        opt.step()
    with torch.no_grad():
        end = float(bce_with_logits(model(x).reshape(-1), y))
    assert end < 0.5 * start


# --- training logs ---


def test_log_entry_format():
    entry = {"epoch": 3, "train_loss": 0.123456789,
             "val_metric": 0.87654321, "wall_seconds": 1.234567}
    assert format_log_entry(entry) == (
        "epoch=3 train_loss=0.123457 val_metric=0.876543 wall_seconds=1.235")


def test_log_roundtrip(tmp_path):
    log = [
        {"epoch": 0, "train_loss": 0.75, "val_metric": 0.5, "wall_seconds": 0.125},
        {"epoch": 1, "train_loss": 0.25, "val_metric": 1.0, "wall_seconds": 0.25},
    ]
    path = tmp_path / "train.log"
    write_training_log(log, path)
    assert parse_training_log(path) == log


# --- train_classifier ---


TINY_CLF = ClassifierConfig(tiny=True)
TINY_SEG = SegmenterConfig(tiny=True)


def test_classifier_rejects_iou_selection(stamped_records):
    with pytest.raises(ConfigError):
        train_classifier(stamped_records,
                         TrainConfig(selection_metric="val_iou"), TINY_CLF)


def test_classifier_requires_train_and_val(stamped_records):
    no_train = [dataclasses.replace(r) for r in stamped_records]
    for rec in no_train:
        if rec.split == "train":
            rec.split = "test"
    with pytest.raises(ConfigError):
        train_classifier(no_train, TrainConfig(max_epochs=1), TINY_CLF)
    no_val = [dataclasses.replace(r) for r in stamped_records]
    for rec in no_val:
        if rec.split == "val":
            rec.split = "test"
    with pytest.raises(ConfigError):
        train_classifier(no_val, TrainConfig(max_epochs=1), TINY_CLF)


def test_classifier_zero_lr_constant_loss(stamped_records):
    cfg = TrainConfig(learning_rate=0.0, batch_size=4, max_epochs=3, seed=11)
    ckpt, log = train_classifier(stamped_records, cfg, TINY_CLF)
    assert [e["epoch"] for e in log] == [0, 1, 2]
    losses = {e["train_loss"] for e in log}
    vals = {e["val_metric"] for e in log}
    assert len(losses) == 1  # weights never move, every epoch replays the stream
    assert len(vals) == 1
    assert ckpt.manifest["metrics"]["epoch"] == 0  # ties keep the earliest


def test_classifier_zero_lr_checkpoint_independent_of_epochs(stamped_records):
    base = dict(learning_rate=0.0, batch_size=4, seed=11)
    short, _ = train_classifier(stamped_records, TrainConfig(max_epochs=1, **base), TINY_CLF)
    long, _ = train_classifier(stamped_records, TrainConfig(max_epochs=3, **base), TINY_CLF)
    assert set(short.tensors) == set(long.tensors)
    for name in short.tensors:
        np.testing.assert_array_equal(short.tensors[name], long.tensors[name])


def test_classifier_same_seed_reproducible(stamped_records):
    cfg = TrainConfig(learning_rate=0.05, batch_size=4, max_epochs=2, seed=23)
    ckpt_a, log_a = train_classifier(stamped_records, cfg, TINY_CLF)
    ckpt_b, log_b = train_classifier(stamped_records, cfg, TINY_CLF)
    for ea, eb in zip(log_a, log_b):
        assert ea["train_loss"] == eb["train_loss"]
        assert ea["val_metric"] == eb["val_metric"]
    for name in ckpt_a.tensors:
        np.testing.assert_array_equal(ckpt_a.tensors[name], ckpt_b.tensors[name])


def test_classifier_checkpoint_reproduces_logged_metric(stamped_records):
    cfg = TrainConfig(learning_rate=0.05, batch_size=4, max_epochs=3, seed=5)
    ckpt, log = train_classifier(stamped_records, cfg, TINY_CLF)
    manifest = ckpt.manifest
    assert manifest["kind"] == "classifier"
    assert manifest["metrics"]["selection_metric"] == "val_accuracy"
    best_logged = max(e["val_metric"] for e in log)
    assert manifest["metrics"]["value"] == pytest.approx(best_logged, abs=1e-12)
    model = ckpt.to_model()
    val_records = [r for r in stamped_records if r.split == "val"]
    report = metrics.evaluate_classification(model, val_records,
                                             TransformPolicy.eval(90), cfg.batch_size)
    assert report.accuracy == pytest.approx(manifest["metrics"]["value"], abs=1e-6)


def test_classifier_divergence_reported(stamped_records):
    cfg = TrainConfig(learning_rate=1e40, momentum=0.9, batch_size=4,
                      max_epochs=5, seed=3)
    with pytest.raises(TrainingDiverged) as exc:
        train_classifier(stamped_records, cfg, TINY_CLF)
    assert exc.value.epoch >= 0
    assert isinstance(exc.value.log, list)


# --- segmentation subsets and train_segmenter ---


def test_segmentation_subset_balanced(stamped_records):
    for rec in stamped_records:
        rec.split = "train"
    subset = segmentation_subset(stamped_records, "train", seed=0)
    positives = [r for r in subset if r.label == 1]
    negatives = [r for r in subset if r.label == 0]
    assert len(positives) == 8  # every masked positive
    assert all(r.mask_path is not None for r in positives)
    assert len(negatives) == 8


def test_segmentation_subset_seeded_and_flag_aware(stamped_records):
    for rec in stamped_records:
        rec.split = "train"
    a = segmentation_subset(stamped_records, "train", seed=1)
    b = segmentation_subset(stamped_records, "train", seed=1)
    assert [id(r) for r in a] == [id(r) for r in b]
    flagged = [dataclasses.replace(r) for r in stamped_records]
    masked = [r for r in flagged if r.mask_path is not None]
    masked[0].flagged = True
    subset = segmentation_subset(flagged, "train", seed=0, training=True)
    assert sum(1 for r in subset if r.label == 1) == 7


def test_segmenter_requires_masked_positives(stamped_records):
    negatives_only = [dataclasses.replace(r) for r in stamped_records if r.label == 0]
    for rec in negatives_only:
        rec.split = "train"
    with pytest.raises(ConfigError):
        train_segmenter(negatives_only, TrainConfig(max_epochs=1), TINY_SEG)


def test_segmenter_smoke_run(stamped_records):
    cfg = TrainConfig(learning_rate=0.05, batch_size=4, max_epochs=2, seed=2,
                      selection_metric="val_iou")
    ckpt, log = train_segmenter(stamped_records, cfg, TINY_SEG)
    assert len(log) == 2
    assert ckpt.manifest["kind"] == "segmenter"
    assert ckpt.manifest["metrics"]["selection_metric"] == "val_iou"
    model = ckpt.to_model()
    assert not model.training
    x = torch.rand(1, 12, 90, 90)
    with torch.no_grad():
        assert model(x).shape == (1, 1, 90, 90)


def test_segmenter_same_seed_reproducible(stamped_records):
    cfg = TrainConfig(learning_rate=0.05, batch_size=4, max_epochs=2, seed=9,
                      selection_metric="val_iou")
    ckpt_a, log_a = train_segmenter(stamped_records, cfg, TINY_SEG)
    ckpt_b, log_b = train_segmenter(stamped_records, cfg, TINY_SEG)
    assert [e["train_loss"] for e in log_a] == [e["train_loss"] for e in log_b]
    for name in ckpt_a.tensors:
        np.testing.assert_array_equal(ckpt_a.tensors[name], ckpt_b.tensors[name])
