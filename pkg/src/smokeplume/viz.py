"""Rendering: true/false-color composites, mask overlays, activation heat.

All renderers take reflectance scenes and return 8-bit RGB arrays of the
scene's height and width; nothing here is stochastic.  Band-to-color
routing follows the smoke-sensitive composite (aerosol band to red, water
vapor to green, short-wave infrared to blue) for false color and the
visible bands for true color.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ShapeMismatch
from .raster_io import MaskRaster, Scene

RENDER_MODES = ("true_color", "false_color", "activation_overlay", "mask_overlay")
DEFAULT_STRETCH = (2.0, 98.0)

TRUE_COLOR_BANDS = ("B04", "B03", "B02")
FALSE_COLOR_BANDS = ("B01", "B09", "B11")


@dataclass(frozen=True)
class RenderSpec:
    mode: str = "true_color"
    stretch: tuple[float, float] = DEFAULT_STRETCH

    def __post_init__(self):
        if self.mode not in RENDER_MODES:
            raise ValueError(f"mode must be one of {RENDER_MODES}, got {self.mode!r}")
        low, high = self.stretch
        if not (0 <= low < high <= 100):
            raise ValueError(f"stretch percentiles must satisfy 0 <= low < high <= 100, got {self.stretch}")


def percentile_stretch(plane: np.ndarray,
                       stretch: tuple[float, float] = DEFAULT_STRETCH) -> np.ndarray:
    """Linearly map the [low, high]-percentile range of a plane onto 0..255.

    A flat plane (degenerate percentile range) renders as mid-gray 128.
    """
    plane = np.asarray(plane, dtype=np.float64)
    low, high = stretch
    lo, hi = np.percentile(plane, [low, high])
    if hi <= lo:
        return np.full(plane.shape, 128, dtype=np.uint8)
    scaled = (plane - lo) / (hi - lo) * 255.0
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def _composite(scene: Scene, band_names, stretch) -> np.ndarray:
    channels = [percentile_stretch(scene.band(name), stretch) for name in band_names]
    return np.stack(channels, axis=-1)


def true_color(scene: Scene, stretch: tuple[float, float] = DEFAULT_STRETCH) -> np.ndarray:
    """RGB from the visible bands (B04, B03, B02), per-band stretched."""
    return _composite(scene, TRUE_COLOR_BANDS, stretch)


def false_color(scene: Scene, stretch: tuple[float, float] = DEFAULT_STRETCH) -> np.ndarray:
    """RGB from the smoke-sensitive bands: R=B01, G=B09, B=B11."""
    return _composite(scene, FALSE_COLOR_BANDS, stretch)


def _as_mask_array(mask, shape) -> np.ndarray | None:
    if mask is None:
        return None
    values = mask.values if isinstance(mask, MaskRaster) else np.asarray(mask)
    if values.shape != shape:
        raise ShapeMismatch(f"mask {values.shape} does not match image {shape}")
    return values.astype(bool)


def overlay_masks(rgb: np.ndarray, gt_mask=None, pred_mask=None,
                  blend: float = 0.5) -> np.ndarray:
    """Additively blend red over ground-truth pixels and green over predicted
    pixels (overlap turns yellow-ish); pixels outside both masks are untouched."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise ShapeMismatch(f"expected an (H, W, 3) image, got {rgb.shape}")
    gt = _as_mask_array(gt_mask, rgb.shape[:2])
    pred = _as_mask_array(pred_mask, rgb.shape[:2])
    out = rgb.astype(np.float64)
    if gt is not None:
        out[gt, 0] += blend * 255.0
    if pred is not None:
        out[pred, 1] += blend * 255.0
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def activation_overlay(rgb: np.ndarray, activation_map: np.ndarray,
                       blend: float = 0.5,
                       stretch: tuple[float, float] = DEFAULT_STRETCH) -> np.ndarray:
    """Blend a blue-to-red heat rendering of an activation map into an image."""
    rgb = np.asarray(rgb)
    amap = np.asarray(activation_map)
    if amap.shape != rgb.shape[:2]:
        raise ShapeMismatch(f"activation map {amap.shape} does not match image {rgb.shape[:2]}")
    heat = percentile_stretch(amap, stretch).astype(np.float64)
    heat_rgb = np.stack([heat, np.zeros_like(heat), 255.0 - heat], axis=-1)
    out = (1.0 - blend) * rgb.astype(np.float64) + blend * heat_rgb
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def save_png(image: np.ndarray, path: Path | str) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 image, got {image.dtype}")
    Image.fromarray(image, mode="RGB").save(Path(path), format="PNG")


def render_scene(scene: Scene, spec: RenderSpec, gt_mask=None, pred_mask=None,
                 activation_map=None) -> np.ndarray:
    """Render one scene according to a RenderSpec; overlays draw on the
    false-color composite, where smoke is most visible."""
    if spec.mode == "true_color":
        return true_color(scene, spec.stretch)
    if spec.mode == "false_color":
        return false_color(scene, spec.stretch)
    base = false_color(scene, spec.stretch)
    if spec.mode == "mask_overlay":
        return overlay_masks(base, gt_mask, pred_mask)
    if activation_map is None:
        raise ValueError("activation_overlay requires an activation map")
    return activation_overlay(base, activation_map, stretch=spec.stretch)
