"""Sample inventory: manifest parsing, location-disjoint splits, balancing, batches.

The manifest is a UTF-8 CSV with header
``site_id,lat,lon,timestamp,scene_path,label,mask_path`` (mask_path may be
empty).  Relative paths resolve against the manifest's own directory.
Split assignments are site-level so no location leaks across subsets.
"""

import csv
import functools
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterator

import numpy as np
import torch

from . import raster_io
from .augment import TransformPolicy, apply_pair
from .errors import (
    CannotBalance,
    LabelMaskConflict,
    ManifestError,
    RecordLoadError,
    ShapeMismatch,
    TooFewSites,
)

MANIFEST_COLUMNS = ("site_id", "lat", "lon", "timestamp", "scene_path", "label", "mask_path")
SPLITS = ("train", "val", "test")

# Scenes whose red band is mostly exactly zero are treated as no-data captures
# and excluded from training by default.
NODATA_FLAG_THRESHOLD = 0.5


@dataclass
class SampleRecord:
    """One catalog row binding a scene to its label, mask and split."""

    site_id: str
    lat: float
    lon: float
    timestamp: datetime
    scene_path: Path
    label: int
    mask_path: Path | None = None
    split: str = "unassigned"
    flagged: bool = False  # mostly-no-data scene, skipped by training


@dataclass(frozen=True)
class SplitManifest:
    """Site-level split assignment with the ratios and seed that produced it."""

    assignments: dict[str, str]
    ratios: tuple[float, float, float]
    seed: int


def build_catalog(manifest_path: Path | str, validate: str = "exists") -> list[SampleRecord]:
    """Parse a manifest CSV into records.

    ``validate`` is one of ``"none"`` (parse only), ``"exists"`` (check the
    referenced files exist) or ``"load"`` (fully load every scene and mask,
    verify alignment, and flag mostly-no-data scenes).
    """
    if validate not in ("none", "exists", "load"):
        raise ValueError(f"unknown validate mode {validate!r}")
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records: list[SampleRecord] = []
    seen: set[tuple[str, str]] = set()
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(0, "empty file, expected a header row") from None
        if tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError(0, f"header {header} != {list(MANIFEST_COLUMNS)}")
        for row_no, row in enumerate(reader, start=1):
            records.append(_parse_row(row_no, row, base, seen))

    if validate != "none":
        _validate_records(records, deep=(validate == "load"))
    return records


def _parse_row(row_no: int, row: list[str], base: Path,
               seen: set[tuple[str, str]]) -> SampleRecord:
    if len(row) != len(MANIFEST_COLUMNS):
        raise ManifestError(row_no, f"expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
    site_id, lat, lon, ts, scene_path, label, mask_path = row
    if not site_id:
        raise ManifestError(row_no, "empty site_id")
    try:
        timestamp = raster_io.parse_timestamp(ts)
    except ValueError:
        raise ManifestError(row_no, f"bad timestamp {ts!r}") from None
    if label not in ("0", "1"):
        raise ManifestError(row_no, f"label must be 0 or 1, got {label!r}")
    try:
        lat_f, lon_f = float(lat), float(lon)
    except ValueError:
        raise ManifestError(row_no, f"bad coordinates {lat!r}, {lon!r}") from None
    key = (site_id, ts)
    if key in seen:
        raise ManifestError(row_no, f"duplicate (site_id, timestamp) {key}")
    seen.add(key)
    mask = _resolve(base, mask_path) if mask_path else None
    if mask is not None and label == "0":
        raise LabelMaskConflict(f"row {row_no}: label 0 but mask_path set")
    return SampleRecord(
        site_id=site_id,
        lat=lat_f,
        lon=lon_f,
        timestamp=timestamp,
        scene_path=_resolve(base, scene_path),
        label=int(label),
        mask_path=mask,
    )


def _resolve(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def _validate_records(records: list[SampleRecord], deep: bool) -> None:
    exists_cache: dict[Path, bool] = {}
    for i, rec in enumerate(records, start=1):
        for path in (rec.scene_path, rec.mask_path):
            if path is None:
                continue
            ok = exists_cache.setdefault(path, path.exists())
            if not ok:
                raise ManifestError(i, f"referenced file missing: {path}")
        if deep:
            scene = _load_scene_cached(str(rec.scene_path))
            if rec.mask_path is not None:
                mask = _load_mask_cached(str(rec.mask_path))
                if mask.shape != scene.shape[1:]:
                    raise ShapeMismatch(
                        f"row {i}: mask {mask.shape} does not match scene {scene.shape[1:]}"
                    )
            zero_frac = float(np.count_nonzero(scene[3] == 0.0)) / scene[3].size
            rec.flagged = zero_frac > NODATA_FLAG_THRESHOLD


def label_counts(records: list[SampleRecord]) -> tuple[int, int]:
    """(positive, negative) record counts."""
    pos = sum(1 for r in records if r.label == 1)
    return pos, len(records) - pos


def write_manifest(rows: list[dict], path: Path | str) -> None:
    """Write manifest rows (dicts keyed by the manifest columns) as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(MANIFEST_COLUMNS))
        writer.writeheader()
        writer.writerows(rows)


# --- splits ---


def assign_splits(records: list[SampleRecord],
                  ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
                  seed: int = 0) -> SplitManifest:
    """Assign every site to exactly one of train/val/test.

    Sites are shuffled with the seed, then assigned greedily by cumulative
    image count: train fills to its target first, then val, the rest is test.
    """
    if not records:
        raise ValueError("no records to split")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative values summing to 1, got {ratios}")

    images_per_site: dict[str, int] = {}
    for rec in records:
        images_per_site[rec.site_id] = images_per_site.get(rec.site_id, 0) + 1
    sites = sorted(images_per_site)
    if len(sites) < 3:
        raise TooFewSites(f"need at least 3 sites, got {len(sites)}")

    rng = np.random.default_rng(seed)
    order = [sites[i] for i in rng.permutation(len(sites))]
    total = len(records)
    target_train = ratios[0] * total
    target_val = ratios[1] * total

    assignments: dict[str, str] = {}
    count_train = count_val = 0
    for site in order:
        n = images_per_site[site]
        if count_train < target_train:
            assignments[site] = "train"
            count_train += n
        elif count_val < target_val:
            assignments[site] = "val"
            count_val += n
        else:
            assignments[site] = "test"
    return SplitManifest(assignments, tuple(ratios), seed)


def apply_split(records: list[SampleRecord], manifest: SplitManifest) -> list[SampleRecord]:
    """Stamp each record with its site's split. Returns the same list."""
    for rec in records:
        rec.split = manifest.assignments.get(rec.site_id, "unassigned")
    return records


def split_fractions(records: list[SampleRecord]) -> dict[str, float]:
    counts = {s: 0 for s in SPLITS}
    for rec in records:
        if rec.split in counts:
            counts[rec.split] += 1
    total = max(1, len(records))
    return {s: counts[s] / total for s in SPLITS}


def write_split_manifest(manifest: SplitManifest, path: Path | str) -> None:
    ratios = ",".join(f"{r:.6g}" for r in manifest.ratios)
    lines = [f"# ratios={ratios} seed={manifest.seed}"]
    lines += [f"{site}\t{split}" for site, split in sorted(manifest.assignments.items())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split_manifest(path: Path | str) -> SplitManifest:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    ratios = (0.70, 0.15, 0.15)
    seed = 0
    assignments: dict[str, str] = {}
    for line in text:
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for token in line[1:].split():
                if token.startswith("ratios="):
                    ratios = tuple(float(x) for x in token[7:].split(","))
                elif token.startswith("seed="):
                    seed = int(token[5:])
            continue
        site, split = line.split("\t")
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r} for site {site}")
        assignments[site] = split
    return SplitManifest(assignments, ratios, seed)


# --- class balancing ---


def balance_by_duplication(records: list[SampleRecord], seed: int = 0) -> list[SampleRecord]:
    """Duplicate minority-class records until classes have equal counts.

    Whole-multiple copies first, then a seeded random remainder drawn without
    replacement; the combined list is returned seeded-shuffled.
    """
    positives = [r for r in records if r.label == 1]
    negatives = [r for r in records if r.label == 0]
    if not positives or not negatives:
        raise CannotBalance("need at least one record of each class")

    minority, majority = (positives, negatives)
    if len(positives) > len(negatives):
        minority, majority = negatives, positives

    rng = np.random.default_rng(seed)
    whole, remainder = divmod(len(majority), len(minority))
    duplicated = list(minority) * whole
    if remainder:
        extra = rng.choice(len(minority), size=remainder, replace=False)
        duplicated += [minority[i] for i in sorted(extra)]
    combined = majority + duplicated
    return [combined[i] for i in rng.permutation(len(combined))]


# --- batch assembly ---


@functools.lru_cache(maxsize=256)
def _load_scene_cached(path: str) -> np.ndarray:
    return raster_io.load_scene(path).bands


@functools.lru_cache(maxsize=1024)
def _load_mask_cached(path: str) -> np.ndarray:
    return raster_io.read_mask(path).values


def clear_scene_cache() -> None:
    _load_scene_cached.cache_clear()
    _load_mask_cached.cache_clear()


def batches(records: list[SampleRecord], batch_size: int, policy: TransformPolicy,
            seed: int = 0, target: str = "label",
            shuffle: bool = True) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield one epoch of (image, target) tensor batches.

    Images are float32 of shape (B, 12, crop, crop).  ``target="label"``
    yields float labels of shape (B,); ``target="mask"`` yields float masks
    of shape (B, 1, crop, crop), all-zero for records without a mask file.
    Masks go through exactly the geometric transforms of their scene.  The
    final partial batch is emitted.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if target not in ("label", "mask"):
        raise ValueError(f"unknown target {target!r}")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records)) if shuffle else np.arange(len(records))

    images: list[torch.Tensor] = []
    targets: list[torch.Tensor] = []
    for idx in order:
        rec = records[idx]
        try:
            bands = _load_scene_cached(str(rec.scene_path))
            mask = None
            if target == "mask":
                if rec.mask_path is not None:
                    mask = _load_mask_cached(str(rec.mask_path))
                else:
                    mask = np.zeros(bands.shape[1:], dtype=np.uint8)
        except Exception as exc:  # noqa: BLE001 - re-raised with record identity
            raise RecordLoadError(rec.site_id, rec.timestamp, rec.scene_path, exc) from exc

        aug_bands, aug_mask = apply_pair(bands, mask, policy, rng)
        arr = np.ascontiguousarray(aug_bands, dtype=np.float32)
        if not arr.flags.writeable:
            # Identity transforms can hand back the read-only cached scene;
            # tensors must never alias it.
            arr = arr.copy()
        images.append(torch.from_numpy(arr))
        if target == "label":
            targets.append(torch.tensor(float(rec.label)))
        else:
            targets.append(torch.from_numpy(
                np.ascontiguousarray(aug_mask, dtype=np.float32))[None])

        if len(images) == batch_size:
            yield torch.stack(images), torch.stack(targets)
            images, targets = [], []
    if images:
        yield torch.stack(images), torch.stack(targets)
