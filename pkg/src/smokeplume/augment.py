"""Geometric augmentation applied identically to a scene tensor and its mask.

All functions operate on numpy arrays laid out (C, H, W) for scenes and
(H, W) for masks; spatial axes are always the last two.  Randomness comes
from an explicitly passed numpy Generator, so callers own determinism.
"""

from dataclasses import dataclass

import numpy as np

from .errors import CropTooLarge, NonSquare, PairMismatch


@dataclass(frozen=True)
class TransformPolicy:
    """Which transforms to apply and at what crop size.

    ``train_random`` composes random flips, a random 90-degree rotation and
    a random crop; ``eval_center`` applies only the deterministic center crop.
    """

    enable_flips: bool = True
    enable_rot90: bool = True
    crop_size: int = 90
    mode: str = "train_random"  # or "eval_center"

    def __post_init__(self):
        if self.mode not in ("train_random", "eval_center"):
            raise ValueError(f"unknown policy mode {self.mode!r}")
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")

    @classmethod
    def train(cls, crop_size: int = 90) -> "TransformPolicy":
        return cls(crop_size=crop_size, mode="train_random")

    @classmethod
    def eval(cls, crop_size: int = 90) -> "TransformPolicy":
        return cls(enable_flips=False, enable_rot90=False,
                   crop_size=crop_size, mode="eval_center")


def flip_h(t: np.ndarray) -> np.ndarray:
    """Reverse column order (mirror about the vertical axis)."""
    return t[..., :, ::-1]


def flip_v(t: np.ndarray) -> np.ndarray:
    """Reverse row order (mirror about the horizontal axis)."""
    return t[..., ::-1, :]


def rot90(t: np.ndarray, i: int) -> np.ndarray:
    """Counter-clockwise rotation by i * 90 degrees, i in {0, 1, 2, 3}.

    One step maps input (r, c) to output (W - 1 - c, r).
    """
    if t.shape[-2] != t.shape[-1]:
        raise NonSquare(f"rot90 needs a square grid, got {t.shape[-2]}x{t.shape[-1]}")
    return np.rot90(t, k=i % 4, axes=(-2, -1))


def random_crop(t: np.ndarray, size: int,
                rng: np.random.Generator) -> tuple[np.ndarray, tuple[int, int]]:
    """Crop a size x size window at a uniformly random offset.

    Returns the crop and its (row, col) offset so a paired mask can be
    cropped identically.  The row offset is drawn before the column offset.
    """
    h, w = t.shape[-2], t.shape[-1]
    if size > h or size > w:
        raise CropTooLarge(f"crop {size} exceeds input {h}x{w}")
    r0 = int(rng.integers(0, h - size + 1))
    c0 = int(rng.integers(0, w - size + 1))
    return t[..., r0 : r0 + size, c0 : c0 + size], (r0, c0)


def center_crop(t: np.ndarray, size: int) -> np.ndarray:
    h, w = t.shape[-2], t.shape[-1]
    if size > h or size > w:
        raise CropTooLarge(f"crop {size} exceeds input {h}x{w}")
    r0 = (h - size) // 2
    c0 = (w - size) // 2
    return t[..., r0 : r0 + size, c0 : c0 + size]


def apply_pair(scene: np.ndarray, mask: np.ndarray | None,
               policy: TransformPolicy,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray | None]:
    """Apply one sampled transform sequence to a scene and, if given, its mask.

    Order is fixed: flips, then rotation, then crop, all with identical
    parameters for both tensors.  In ``eval_center`` mode only the
    deterministic center crop runs.  The number of RNG draws depends only
    on the policy, never on the mask, so paired and unpaired calls consume
    the generator identically.
    """
    if mask is not None and mask.shape[-2:] != scene.shape[-2:]:
        raise PairMismatch(
            f"mask {mask.shape[-2:]} does not match scene {scene.shape[-2:]}"
        )

    if policy.mode == "eval_center":
        out_scene = center_crop(scene, policy.crop_size)
        out_mask = None if mask is None else center_crop(mask, policy.crop_size)
        return out_scene, out_mask

    if policy.enable_flips:
        if rng.integers(0, 2):
            scene = flip_h(scene)
            mask = None if mask is None else flip_h(mask)
        if rng.integers(0, 2):
            scene = flip_v(scene)
            mask = None if mask is None else flip_v(mask)
    if policy.enable_rot90:
        i = int(rng.integers(0, 4))
        scene = rot90(scene, i)
        mask = None if mask is None else rot90(mask, i)
    scene, (r0, c0) = random_crop(scene, policy.crop_size, rng)
    if mask is not None:
        mask = mask[..., r0 : r0 + policy.crop_size, c0 : c0 + policy.crop_size]
    return scene, mask
