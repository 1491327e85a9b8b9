"""Network architectures and checkpoint serialization.

Two models: a 50-layer bottleneck residual classifier taking all 12 bands
and emitting one logit, and a U-Net segmenter emitting one logit per pixel.
Checkpoints are zip archives holding ``manifest.json`` plus ``weights.bin``,
a flat sequence of named float32 tensor records, written deterministically
so save -> load -> save is byte-identical.
"""

import io
import json
import struct
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bands import BAND_NAMES, REFLECTANCE_SCALE
from .errors import ArchMismatch, CorruptCheckpoint

# BatchNorm keeps 0.9 of the running statistics per update.
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ClassifierConfig:
    """Bottleneck residual classifier layout; ``tiny=True`` shrinks it for tests."""

    in_channels: int = 12
    block_counts: tuple[int, int, int, int] = (3, 4, 6, 3)
    base_width: int = 64
    tiny: bool = False

    def __post_init__(self):
        if self.tiny:
            object.__setattr__(self, "block_counts", (1, 1, 1, 1))
            object.__setattr__(self, "base_width", 16)
        object.__setattr__(self, "block_counts", tuple(self.block_counts))


@dataclass(frozen=True)
class SegmenterConfig:
    """U-Net layout; inputs are padded to a multiple of 2**depth internally."""

    in_channels: int = 12
    depth: int = 4
    base_width: int = 64
    tiny: bool = False

    def __post_init__(self):
        if self.tiny:
            object.__setattr__(self, "depth", 2)
            object.__setattr__(self, "base_width", 8)

    @property
    def pad_to_multiple(self) -> int:
        return 2 ** self.depth


class Bottleneck(nn.Module):
    """1x1 -> 3x3 -> 1x1 residual block with 4x channel expansion."""

    expansion = 4

    def __init__(self, in_channels: int, width: int, stride: int = 1):
        super().__init__()
        out_channels = width * self.expansion
        self.conv1 = nn.Conv2d(in_channels, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1,
                               padding_mode="replicate", bias=False)
        self.bn2 = nn.BatchNorm2d(width, momentum=BN_MOMENTUM)
        self.conv3 = nn.Conv2d(width, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels, momentum=BN_MOMENTUM)
        self.downsample = None
        if stride != 1 or in_channels != out_channels:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels, momentum=BN_MOMENTUM),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity)


class PlumeClassifier(nn.Module):
    """Bottleneck residual network over 12 bands, producing one scalar logit."""

    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_width
        # Replicate padding keeps spatially constant inputs constant through
        # every stage, so featureless scenes yield featureless activation maps.
        self.conv1 = nn.Conv2d(cfg.in_channels, b, 7, stride=2, padding=3,
                               padding_mode="replicate", bias=False)
        self.bn1 = nn.BatchNorm2d(b, momentum=BN_MOMENTUM)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self._in = b
        self.layer1 = self._stage(b, cfg.block_counts[0], stride=1)
        self.layer2 = self._stage(b * 2, cfg.block_counts[1], stride=2)
        self.layer3 = self._stage(b * 4, cfg.block_counts[2], stride=2)
        self.layer4 = self._stage(b * 8, cfg.block_counts[3], stride=2)
        self.avgpool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(b * 8 * Bottleneck.expansion, 1)

    def _stage(self, width: int, blocks: int, stride: int) -> nn.Sequential:
        layers = [Bottleneck(self._in, width, stride)]
        self._in = width * Bottleneck.expansion
        layers += [Bottleneck(self._in, width) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        x = self.maxpool(x)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        x = self.layer4(x)
        x = self.avgpool(x)
        return self.fc(torch.flatten(x, 1))


class DoubleConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels, momentum=BN_MOMENTUM),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class PlumeSegmenter(nn.Module):
    """U-Net over 12 bands, one logit per input pixel.

    Inputs are reflect-padded to the next multiple of 2**depth so odd sizes
    (the 90x90 training crops in particular) flow through; the output is
    cropped back to the input size.
    """

    def __init__(self, cfg: SegmenterConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * 2**i for i in range(cfg.depth + 1)]
        self.inc = DoubleConv(cfg.in_channels, widths[0])
        self.pool = nn.MaxPool2d(2)
        self.downs = nn.ModuleList(
            DoubleConv(widths[i], widths[i + 1]) for i in range(cfg.depth)
        )
        self.up_samples = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 2, stride=2)
            for i in reversed(range(cfg.depth))
        )
        self.up_convs = nn.ModuleList(
            DoubleConv(widths[i] * 2, widths[i]) for i in reversed(range(cfg.depth))
        )
        self.out_conv = nn.Conv2d(widths[0], 1, 1)

    def forward(self, x):
        h, w = x.shape[-2], x.shape[-1]
        mult = self.cfg.pad_to_multiple
        pad_h = (mult - h % mult) % mult
        pad_w = (mult - w % mult) % mult
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")

        skips = []
        x = self.inc(x)
        for down in self.downs:
            skips.append(x)
            x = down(self.pool(x))
        for up, conv, skip in zip(self.up_samples, self.up_convs, reversed(skips)):
            x = up(x)
            x = conv(torch.cat([skip, x], dim=1))
        x = self.out_conv(x)
        return x[..., :h, :w]


# --- construction and seeding ---


def _init_weights(model: nn.Module, seed: int) -> None:
    """Variance-scaling fan-in init for conv/linear weights, zeros for biases."""
    gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.ConvTranspose2d):
            fan_in = m.weight.shape[0] * m.weight.shape[2] * m.weight.shape[3]
            with torch.no_grad():
                m.weight.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def build_classifier(cfg: ClassifierConfig | None = None, seed: int = 0) -> PlumeClassifier:
    model = PlumeClassifier(cfg or ClassifierConfig())
    _init_weights(model, seed)
    return model


def build_segmenter(cfg: SegmenterConfig | None = None, seed: int = 0) -> PlumeSegmenter:
    model = PlumeSegmenter(cfg or SegmenterConfig())
    _init_weights(model, seed)
    return model


# --- activation extraction ---


def extract_activation_map(model: PlumeClassifier,
                           scene_tensor) -> tuple[np.ndarray, np.ndarray]:
    """Channel-mean activation of the second residual stage for one scene.

    Returns (map upsampled nearest to the input H x W, raw low-resolution
    grid).  Accepts a (12, H, W) numpy array or torch tensor.
    """
    arr = np.asarray(scene_tensor, dtype=np.float32)
    if not arr.flags.writeable:
        # Cached scenes are read-only; tensors must never alias them.
        arr = arr.copy()
    x = torch.as_tensor(arr)
    if x.ndim != 3:
        raise ValueError(f"expected a (C, H, W) scene tensor, got shape {tuple(x.shape)}")
    h, w = x.shape[-2], x.shape[-1]

    captured: list[torch.Tensor] = []
    handle = model.layer2.register_forward_hook(
        lambda _m, _inp, out: captured.append(out.detach())
    )
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(x[None])
    finally:
        handle.remove()
        model.train(was_training)

    raw = captured[0].mean(dim=1)  # (1, h', w')
    up = F.interpolate(raw[None], size=(h, w), mode="nearest")[0, 0]
    return up.numpy(), raw[0].numpy()


# --- checkpoint serialization ---

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"
_ZIP_DATE = (2020, 1, 1, 0, 0, 0)


@dataclass
class ModelCheckpoint:
    """Named float32 weight tensors plus an architecture/normalization manifest."""

    manifest: dict
    tensors: dict[str, np.ndarray]

    @classmethod
    def from_model(cls, model: nn.Module, manifest: dict) -> "ModelCheckpoint":
        tensors = {
            name: tensor.detach().cpu().numpy().astype(np.float32)
            for name, tensor in model.state_dict().items()
        }
        return cls(manifest=manifest, tensors=tensors)

    def load_into(self, model: nn.Module) -> nn.Module:
        state = model.state_dict()
        if set(state) != set(self.tensors):
            missing = sorted(set(state) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(state))
            raise ArchMismatch(f"tensor names differ (missing {missing}, extra {extra})")
        new_state = {}
        for name, target in state.items():
            arr = self.tensors[name]
            if tuple(arr.shape) != tuple(target.shape):
                raise ArchMismatch(
                    f"tensor {name}: checkpoint {tuple(arr.shape)} vs model {tuple(target.shape)}"
                )
            new_state[name] = torch.from_numpy(arr.copy()).to(target.dtype)
        model.load_state_dict(new_state)
        # Restored models are for inference until a caller opts back into
        # training; eval mode also keeps stray forward passes from silently
        # updating batch-norm running statistics.
        model.eval()
        return model

    def to_model(self) -> nn.Module:
        kind = self.manifest.get("kind")
        config = self.manifest.get("config", {})
        if kind == "classifier":
            model = PlumeClassifier(_classifier_config_from(config))
        elif kind == "segmenter":
            model = PlumeSegmenter(_segmenter_config_from(config))
        else:
            raise CorruptCheckpoint(f"manifest has unknown model kind {kind!r}")
        return self.load_into(model)

    def save(self, path: Path | str) -> None:
        payload = io.BytesIO()
        for name, arr in self.tensors.items():
            encoded = name.encode("utf-8")
            payload.write(struct.pack("<I", len(encoded)))
            payload.write(encoded)
            payload.write(struct.pack("<I", arr.ndim))
            payload.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            payload.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        manifest_bytes = json.dumps(self.manifest, sort_keys=True, indent=2).encode("utf-8")
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name, data in ((MANIFEST_NAME, manifest_bytes), (WEIGHTS_NAME, payload.getvalue())):
                info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
                zf.writestr(info, data)

    @classmethod
    def read(cls, path: Path | str) -> "ModelCheckpoint":
        try:
            with zipfile.ZipFile(path) as zf:
                manifest = json.loads(zf.read(MANIFEST_NAME).decode("utf-8"))
                blob = zf.read(WEIGHTS_NAME)
        except (zipfile.BadZipFile, KeyError, OSError, json.JSONDecodeError,
                UnicodeDecodeError) as exc:
            raise CorruptCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
        return cls(manifest=manifest, tensors=_unpack_tensors(blob, path))


def _unpack_tensors(blob: bytes, path) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    try:
        while offset < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + name_len].decode("utf-8")
            if len(name.encode("utf-8")) != name_len:
                raise CorruptCheckpoint(f"truncated record name in {path}")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            end = offset + 4 * count
            if end > len(blob):
                raise CorruptCheckpoint(f"truncated payload for {name} in {path}")
            tensors[name] = np.frombuffer(
                blob[offset:end], dtype="<f4"
            ).reshape(shape).copy()
            offset = end
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"malformed weights record in {path}: {exc}") from exc
    return tensors


def _classifier_config_from(d: dict) -> ClassifierConfig:
    return ClassifierConfig(
        in_channels=int(d.get("in_channels", 12)),
        block_counts=tuple(d.get("block_counts", (3, 4, 6, 3))),
        base_width=int(d.get("base_width", 64)),
        tiny=bool(d.get("tiny", False)),
    )


def _segmenter_config_from(d: dict) -> SegmenterConfig:
    return SegmenterConfig(
        in_channels=int(d.get("in_channels", 12)),
        depth=int(d.get("depth", 4)),
        base_width=int(d.get("base_width", 64)),
        tiny=bool(d.get("tiny", False)),
    )


def build_manifest(kind: str, cfg, training_step: int = 0,
                   metrics: dict | None = None) -> dict:
    """Standard checkpoint manifest: architecture, band order, normalization."""
    return {
        "kind": kind,
        "config": asdict(cfg),
        "band_order": list(BAND_NAMES),
        "reflectance_scale": REFLECTANCE_SCALE,
        "training_step": training_step,
        "metrics": metrics or {},
    }


def save_checkpoint(model: nn.Module, manifest: dict, path: Path | str) -> None:
    """Serialize a model plus manifest to the checkpoint archive format."""
    ModelCheckpoint.from_model(model, manifest).save(path)


def load_checkpoint(path: Path | str, model: nn.Module | None = None) -> tuple[nn.Module, dict]:
    """Restore (model, manifest) from a checkpoint archive.

    When ``model`` is given, weights load into it (raising ArchMismatch if
    the architectures differ); otherwise the model is rebuilt from the
    manifest's kind and config.
    """
    ckpt = ModelCheckpoint.read(path)
    if model is not None:
        return ckpt.load_into(model), ckpt.manifest
    return ckpt.to_model(), ckpt.manifest
