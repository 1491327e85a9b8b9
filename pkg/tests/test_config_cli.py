"""Config document parsing and the end-to-end command-line pipeline."""

import json

import numpy as np
import pytest
import tifffile
import torch

from smokeplume import catalog, raster_io
from smokeplume.catalog import SplitManifest, write_split_manifest
from smokeplume.cli import main
from smokeplume.config import (
    RunConfig,
    apply_overrides,
    load_config,
    parse_config,
    write_config,
)
from smokeplume.errors import ConfigError
from smokeplume.models import load_checkpoint
from smokeplume.training import parse_training_log

torch.set_num_threads(2)


# --- config document ---


def test_parse_empty_config_is_defaults():
    assert parse_config("") == RunConfig()


def test_parse_values_comments_and_blanks():
    text = """
    # training setup
    seed = 7
    train.learning_rate = 0.25   # aggressive
    train.batch_size = 4
    augment.enable_flips = off
    classifier.tiny = yes
    """
    cfg = parse_config(text)
    assert cfg.seed == 7
    assert cfg.learning_rate == 0.25
    assert cfg.batch_size == 4
    assert cfg.enable_flips is False
    assert cfg.classifier_tiny is True
    assert cfg.momentum == 0.9  # untouched default


def test_parse_unknown_key_reports_line():
    with pytest.raises(ConfigError) as exc:
        parse_config("seed = 1\ntrain.warmup = 5\n")
    assert "line 2" in str(exc.value)


def test_parse_missing_equals():
    with pytest.raises(ConfigError):
        parse_config("just some words\n")


def test_parse_bad_value_reports_line():
    with pytest.raises(ConfigError) as exc:
        parse_config("train.batch_size = many\n")
    assert "line 1" in str(exc.value)
    with pytest.raises(ConfigError):
        parse_config("classifier.tiny = maybe\n")


def test_write_load_roundtrip(tmp_path):
    cfg = RunConfig(seed=9, learning_rate=0.01, enable_rot90=False,
                    segmenter_tiny=True, data_dir="/data")
    path = tmp_path / "run.cfg"
    write_config(cfg, path)
    assert load_config(path) == cfg


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_apply_overrides():
    cfg = RunConfig(seed=1, threads=2)
    assert apply_overrides(cfg, seed=None, threads=None) == cfg
    assert apply_overrides(cfg, seed=5).seed == 5


def test_resolve_precedence(tmp_path, monkeypatch):
    monkeypatch.delenv("PLUME_DATA_DIR", raising=False)
    cfg = RunConfig()
    assert str(cfg.resolve("/abs/path.tif")) == "/abs/path.tif"
    monkeypatch.chdir(tmp_path)
    assert cfg.resolve("rel.tif") == tmp_path / "rel.tif"
    with_dir = RunConfig(data_dir=str(tmp_path / "root"))
    assert with_dir.resolve("rel.tif") == tmp_path / "root" / "rel.tif"
    monkeypatch.setenv("PLUME_DATA_DIR", str(tmp_path / "env"))
    assert cfg.resolve("rel.tif") == tmp_path / "env" / "rel.tif"
    assert with_dir.resolve("rel.tif") == tmp_path / "root" / "rel.tif"  # data_dir wins


def test_selection_metric_defaults_by_task():
    cfg = RunConfig()
    assert cfg.train_config("classify").selection_metric == "val_accuracy"
    assert cfg.train_config("segment").selection_metric == "val_iou"
    explicit = RunConfig(selection_metric="val_accuracy")
    assert explicit.train_config("segment").selection_metric == "val_accuracy"


def test_config_builds_policies_and_model_configs():
    cfg = RunConfig(crop_size=64, enable_flips=False, classifier_tiny=True,
                    segmenter_depth=3, segmenter_base_width=8)
    policy = cfg.train_policy()
    assert policy.crop_size == 64 and not policy.enable_flips
    assert cfg.eval_policy().mode == "eval_center"
    assert cfg.classifier_config().tiny
    seg = cfg.segmenter_config()
    assert seg.depth == 3 and seg.base_width == 8


# --- CLI pipeline ---

TRAIN_SITES = ("site-0000", "site-0002", "site-0003")
VAL_SITE = "site-0004"


@pytest.fixture(scope="module")
def cli_env(tmp_path_factory, dataset_dir):
    """Config, hand-crafted split, and two 2-epoch tiny checkpoints."""
    work = tmp_path_factory.mktemp("cli")
    config = work / "run.cfg"
    config.write_text(
        "seed = 3\n"
        "threads = 2\n"
        "train.learning_rate = 0.05\n"
        "train.batch_size = 8\n"
        "train.max_epochs = 2\n"
        "augment.crop_size = 90\n"
        "classifier.tiny = true\n"
        "segmenter.tiny = true\n"
    )
    assignments = {s: "train" for s in TRAIN_SITES}
    assignments[VAL_SITE] = "val"
    assignments.update({"site-0001": "test", "site-0005": "test"})
    split = work / "splits.tsv"
    write_split_manifest(SplitManifest(assignments, (0.5, 0.25, 0.25), 0), split)

    manifest = dataset_dir / "manifest.csv"
    runs = work / "runs"
    for task in ("classify", "segment"):
        rc = main(["--config", str(config), "train", task, str(manifest),
                   "--split", str(split), "--out-dir", str(runs)])
        assert rc == 0
    return {
        "work": work, "config": config, "split": split, "manifest": manifest,
        "clf_ckpt": runs / "classify.ckpt", "seg_ckpt": runs / "segment.ckpt",
        "runs": runs,
    }


def test_cli_synth_writes_loadable_dataset(tmp_path, capsys):
    out = tmp_path / "synthetic"
    rc = main(["--seed", "5", "synth", str(out), "--positives", "3",
               "--negatives", "3", "--sites", "3", "--masked-fraction", "1.0"])
    assert rc == 0
    printed = capsys.readouterr().out.strip()
    assert printed == str(out / "manifest.csv")
    records = catalog.build_catalog(printed)
    assert catalog.label_counts(records) == (3, 3)


def test_cli_split_writes_manifest(tmp_path, dataset_dir, capsys):
    out = tmp_path / "splits.tsv"
    rc = main(["--seed", "4", "split", str(dataset_dir / "manifest.csv"),
               "--ratios", "0.5,0.25,0.25", "--out", str(out)])
    assert rc == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("train=")
    manifest = catalog.read_split_manifest(out)
    assert manifest.ratios == (0.5, 0.25, 0.25)
    assert manifest.seed == 4
    assert len(manifest.assignments) == 6
    fractions = [float(part.split("=")[1]) for part in line.split()]
    assert sum(fractions) == pytest.approx(1.0)
    assert fractions[0] >= 0.25  # train got the largest share


def test_cli_split_deterministic(tmp_path, dataset_dir):
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    for out in (a, b):
        assert main(["--seed", "11", "split", str(dataset_dir / "manifest.csv"),
                     "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_cli_split_bad_ratios(tmp_path, dataset_dir, capsys):
    rc = main(["split", str(dataset_dir / "manifest.csv"),
               "--ratios", "0.5,0.4,0.2", "--out", str(tmp_path / "s.tsv")])
    assert rc == 2
    assert "usage error" in capsys.readouterr().err


def test_cli_split_too_few_sites(tmp_path, capsys):
    out = tmp_path / "two-sites"
    main(["synth", str(out), "--positives", "2", "--negatives", "2", "--sites", "2"])
    capsys.readouterr()
    rc = main(["split", str(out / "manifest.csv"), "--out", str(tmp_path / "s.tsv")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_cli_train_artifacts(cli_env, capsys):
    log = parse_training_log(cli_env["runs"] / "classify.log")
    assert [e["epoch"] for e in log] == [0, 1]
    assert cli_env["clf_ckpt"].exists()
    _, manifest = load_checkpoint(cli_env["clf_ckpt"])
    assert manifest["kind"] == "classifier"
    assert manifest["config"]["tiny"] is True
    _, seg_manifest = load_checkpoint(cli_env["seg_ckpt"])
    assert seg_manifest["kind"] == "segmenter"
    assert seg_manifest["metrics"]["selection_metric"] == "val_iou"


def test_cli_train_zero_lr_constant_loss(cli_env, tmp_path, capsys):
    config = tmp_path / "frozen.cfg"
    config.write_text(
        "seed = 3\nthreads = 2\ntrain.learning_rate = 0.0\n"
        "train.batch_size = 8\ntrain.max_epochs = 3\n"
        "augment.crop_size = 90\nclassifier.tiny = true\n")
    rc = main(["--config", str(config), "train", "classify", str(cli_env["manifest"]),
               "--split", str(cli_env["split"]), "--out-dir", str(tmp_path / "run")])
    assert rc == 0
    log = parse_training_log(tmp_path / "run" / "classify.log")
    assert len({e["train_loss"] for e in log}) == 1
    assert len({e["val_metric"] for e in log}) == 1


def test_cli_train_requires_split_flag(cli_env):
    with pytest.raises(SystemExit) as exc:
        main(["train", "classify", str(cli_env["manifest"]),
              "--out-dir", "/tmp/never"])
    assert exc.value.code == 2


def test_cli_eval_reports_json(cli_env, capsys):
    rc = main(["--config", str(cli_env["config"]), "eval", "classify",
               str(cli_env["manifest"]), "--checkpoint", str(cli_env["clf_ckpt"]),
               "--split", str(cli_env["split"]), "--subset", "val"])
    assert rc == 0
    out, err = capsys.readouterr()
    doc = json.loads(out)
    assert set(doc) == {"accuracy", "area_ratio_mean", "area_recall_mean",
                        "channel_importance", "confusion", "iou_global",
                        "iou_per_image_mean"}
    assert doc["channel_importance"] is None  # no --attribution flag
    counts = doc["confusion"]
    assert sum(counts.values()) == 5  # val site holds five scenes
    _, manifest = load_checkpoint(cli_env["clf_ckpt"])
    assert doc["accuracy"] == pytest.approx(manifest["metrics"]["value"], abs=1e-6)
    assert "confusion tp=" in err


def test_cli_eval_attribution_flag(cli_env, capsys):
    rc = main(["--config", str(cli_env["config"]), "eval", "classify",
               str(cli_env["manifest"]), "--checkpoint", str(cli_env["clf_ckpt"]),
               "--split", str(cli_env["split"]), "--subset", "train",
               "--attribution"])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    importance = doc["channel_importance"]
    assert len(importance) == 12
    assert sum(importance) == pytest.approx(1.0, abs=1e-9)
    assert min(importance) >= 0.0


def test_cli_eval_segmentation(cli_env, capsys):
    rc = main(["--config", str(cli_env["config"]), "eval", "segment",
               str(cli_env["manifest"]), "--checkpoint", str(cli_env["seg_ckpt"]),
               "--split", str(cli_env["split"]), "--subset", "val"])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["accuracy"] is not None
    assert doc["confusion"] is not None


def test_cli_eval_missing_checkpoint(cli_env, capsys):
    rc = main(["eval", "classify", str(cli_env["manifest"]),
               "--checkpoint", str(cli_env["work"] / "nope.ckpt"),
               "--split", str(cli_env["split"])])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_cli_infer_writes_masks_and_areas(cli_env, dataset_records, tmp_path, capsys):
    negatives = [r for r in dataset_records if r.label == 0][:2]
    scenes = [str(r.scene_path) for r in negatives]
    out = tmp_path / "pred"
    rc = main(["--config", str(cli_env["config"]), "infer", *scenes,
               "--checkpoint", str(cli_env["seg_ckpt"]), "--out-dir", str(out),
               "--overlay"])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 2
    for line, scene_path in zip(lines, scenes):
        pixels = int(line.split("smoke_pixels=")[1].split()[0])
        area = float(line.split("smoke_area_m2=")[1])
        assert area == pixels * 100.0
        stem = scene_path.rsplit("/", 1)[-1][:-4]
        mask = raster_io.read_mask(out / f"{stem}_pred.tif")
        assert int(mask.values.sum()) == pixels
        assert (out / f"{stem}_overlay.png").exists()


def test_cli_infer_rejects_classifier_checkpoint(cli_env, dataset_records, tmp_path, capsys):
    scene = str(dataset_records[0].scene_path)
    rc = main(["infer", scene, "--checkpoint", str(cli_env["clf_ckpt"]),
               "--out-dir", str(tmp_path)])
    assert rc == 1
    assert "segmenter" in capsys.readouterr().err


def test_cli_infer_continues_after_bad_scene(cli_env, dataset_records, tmp_path, capsys):
    good = str(dataset_records[0].scene_path)
    rc = main(["--config", str(cli_env["config"]), "infer", "/nonexistent.tif", good,
               "--checkpoint", str(cli_env["seg_ckpt"]), "--out-dir", str(tmp_path)])
    assert rc == 1  # per-item failure recorded
    out, err = capsys.readouterr()
    assert "error: /nonexistent.tif" in err
    assert "smoke_pixels=" in out  # the good scene still ran
    assert len(list(tmp_path.glob("*_pred.tif"))) == 1


def test_cli_render_modes(cli_env, dataset_records, tmp_path, capsys):
    positive = next(r for r in dataset_records if r.mask_path is not None)
    base = ["render", str(positive.scene_path)]
    assert main(base + ["--out", str(tmp_path / "fc.png")]) == 0
    assert main(base + ["--mode", "true_color", "--out", str(tmp_path / "tc.png")]) == 0
    assert main(base + ["--mode", "mask_overlay", "--gt-mask", str(positive.mask_path),
                        "--out", str(tmp_path / "mo.png")]) == 0
    assert main(base + ["--mode", "activation_overlay",
                        "--checkpoint", str(cli_env["clf_ckpt"]),
                        "--out", str(tmp_path / "ao.png")]) == 0
    for name in ("fc", "tc", "mo", "ao"):
        assert (tmp_path / f"{name}.png").stat().st_size > 0
    capsys.readouterr()


def test_cli_render_activation_needs_classifier(cli_env, dataset_records, tmp_path, capsys):
    scene = str(dataset_records[0].scene_path)
    rc = main(["render", scene, "--mode", "activation_overlay",
               "--out", str(tmp_path / "x.png")])
    assert rc == 1
    rc = main(["render", scene, "--mode", "activation_overlay",
               "--checkpoint", str(cli_env["seg_ckpt"]),
               "--out", str(tmp_path / "x.png")])
    assert rc == 1
    assert "classifier" in capsys.readouterr().err


def test_cli_ingest_converts_and_continues(tmp_path, capsys):
    raw = tmp_path / "raw"
    rng = np.random.default_rng(0)
    from smokeplume.bands import SENTINEL2_BANDS
    from smokeplume.raster_io import write_band_directory

    rows = []
    for i, site in enumerate(("alpha", "beta", "gamma")):
        planes = {
            spec.name: rng.integers(0, 10001, size=(
                120 // (spec.native_resolution // 10),
                120 // (spec.native_resolution // 10)), dtype=np.uint16)
            for spec in SENTINEL2_BANDS
        }
        write_band_directory(planes, raw / site)
        rows.append({"site_id": site, "lat": "40.0", "lon": "10.0",
                     "timestamp": f"2019-06-0{i + 1}T10:00:00Z",
                     "scene_path": str(raw / site), "label": "0", "mask_path": ""})
    (raw / "gamma" / "B09.tif").unlink()  # corrupt the third scene
    manifest = tmp_path / "raw_manifest.csv"
    catalog.write_manifest(rows, manifest)

    out = tmp_path / "canonical"
    rc = main(["ingest", str(manifest), str(out)])
    assert rc == 1  # one failure
    stdout, stderr = capsys.readouterr()
    assert "ingested 2 scenes" in stdout
    assert "gamma" in stderr
    records = catalog.build_catalog(out / "manifest.csv", validate="exists")
    assert [r.site_id for r in records] == ["alpha", "beta"]
    scene = raster_io.load_scene(records[0].scene_path)
    assert scene.bands.shape == (12, 120, 120)

    rc = main(["ingest", str(manifest), str(out)])  # re-run is idempotent
    assert rc == 1
    assert len(catalog.build_catalog(out / "manifest.csv")) == 2
    capsys.readouterr()


def test_cli_resolves_against_data_dir_env(tmp_path, dataset_dir, monkeypatch, capsys):
    monkeypatch.setenv("PLUME_DATA_DIR", str(dataset_dir))
    rc = main(["split", "manifest.csv", "--out", str(tmp_path / "s.tsv")])
    assert rc == 0
    assert (tmp_path / "s.tsv").exists()
    capsys.readouterr()


def test_cli_bad_config_file(tmp_path, capsys):
    config = tmp_path / "bad.cfg"
    config.write_text("train.nope = 1\n")
    rc = main(["--config", str(config), "synth", str(tmp_path / "d")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err
