"""Run configuration: a flat ``key = value`` text document plus overrides.

One document drives every command; keys use dotted paths grouped by the
component they configure (``train.*``, ``augment.*``, ``classifier.*``,
``segmenter.*``).  Unknown keys are rejected so typos fail loudly, and
command-line flags override file values.
"""

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .augment import TransformPolicy
from .errors import ConfigError
from .models import ClassifierConfig, SegmenterConfig
from .training import TrainConfig

DATA_DIR_ENV = "PLUME_DATA_DIR"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 0  # 0 keeps the runtime's default thread count
    data_dir: str = ""
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    max_epochs: int = 10
    selection_metric: str = ""  # empty: val_accuracy for classify, val_iou for segment
    crop_size: int = 90
    enable_flips: bool = True
    enable_rot90: bool = True
    classifier_tiny: bool = False
    classifier_base_width: int = 64
    segmenter_tiny: bool = False
    segmenter_depth: int = 4
    segmenter_base_width: int = 64

    def train_config(self, task: str) -> TrainConfig:
        metric = self.selection_metric
        if not metric:
            metric = "val_iou" if task == "segment" else "val_accuracy"
        return TrainConfig(
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            seed=self.seed,
            selection_metric=metric,
        )

    def train_policy(self) -> TransformPolicy:
        return TransformPolicy(enable_flips=self.enable_flips,
                               enable_rot90=self.enable_rot90,
                               crop_size=self.crop_size, mode="train_random")

    def eval_policy(self) -> TransformPolicy:
        return TransformPolicy.eval(self.crop_size)

    def classifier_config(self) -> ClassifierConfig:
        return ClassifierConfig(base_width=self.classifier_base_width,
                                tiny=self.classifier_tiny)

    def segmenter_config(self) -> SegmenterConfig:
        return SegmenterConfig(depth=self.segmenter_depth,
                               base_width=self.segmenter_base_width,
                               tiny=self.segmenter_tiny)

    def resolve(self, path: Path | str) -> Path:
        """Resolve a path against the configured data root.

        Absolute paths pass through; relative ones resolve against
        ``data_dir`` (or the PLUME_DATA_DIR environment variable, or the
        working directory when neither is set).
        """
        path = Path(path)
        if path.is_absolute():
            return path
        root = self.data_dir or os.environ.get(DATA_DIR_ENV, "")
        return (Path(root) / path).resolve() if root else path.resolve()


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# document key -> (RunConfig field, parser)
CONFIG_KEYS = {
    "seed": ("seed", int),
    "threads": ("threads", int),
    "data_dir": ("data_dir", str),
    "train.learning_rate": ("learning_rate", float),
    "train.momentum": ("momentum", float),
    "train.batch_size": ("batch_size", int),
    "train.max_epochs": ("max_epochs", int),
    "train.selection_metric": ("selection_metric", str),
    "augment.crop_size": ("crop_size", int),
    "augment.enable_flips": ("enable_flips", _parse_bool),
    "augment.enable_rot90": ("enable_rot90", _parse_bool),
    "classifier.tiny": ("classifier_tiny", _parse_bool),
    "classifier.base_width": ("classifier_base_width", int),
    "segmenter.tiny": ("segmenter_tiny", _parse_bool),
    "segmenter.depth": ("segmenter_depth", int),
    "segmenter.base_width": ("segmenter_base_width", int),
}


def parse_config(text: str) -> RunConfig:
    """Parse a flat key = value document; '#' starts a comment."""
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        field_name, caster = CONFIG_KEYS[key]
        try:
            values[field_name] = caster(value)
        except ValueError as exc:
            raise ConfigError(f"line {line_no}: bad value for {key}: {exc}") from exc
    return RunConfig(**values)


def load_config(path: Path | str) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def write_config(cfg: RunConfig, path: Path | str) -> None:
    lines = []
    field_to_key = {field: key for key, (field, _) in CONFIG_KEYS.items()}
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        rendered = str(value).lower() if isinstance(value, bool) else str(value)
        lines.append(f"{field_to_key[f.name]} = {rendered}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Return cfg with non-None override values applied (flags beat file)."""
    live = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **live) if live else cfg
