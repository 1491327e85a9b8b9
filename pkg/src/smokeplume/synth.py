"""Synthetic 12-band scenes with plume-like blobs and exact ground-truth masks.

Scene backgrounds are a flat base reflectance plus seeded smooth noise that
is mostly shared across bands (a spectrally flat albedo texture) with a
small per-band component.  Half of all scenes additionally carry a "cloud":
a bright blob raising every band equally.  A positive scene adds a rotated
anisotropic Gaussian plume blob to the smoke-sensitive bands only (B01,
B09, B11 by default), and the mask marks exactly the pixels where the
noiseless plume exceeds half its amplitude.

This construction makes the sum of the three affected-band means strictly
larger for every positive than for every negative (clouds are too weak to
close the gap), so overfit tests are well-posed — while brightness alone
does not separate the classes, forcing a classifier to compare the affected
bands against the rest, which is what per-band gradient attribution assumes.
"""

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import raster_io
from .bands import BAND_INDEX, BAND_NAMES, SCENE_SIZE, SMOKE_SENSITIVE_BANDS
from .raster_io import GeoOrigin, MaskRaster, Scene

# One shared background level for every band, kept well below the plume
# amplitude: first-layer weight gradients scale with input content, so a
# quiet, spectrally flat background lets the plume dominate what gradient
# attribution can pick up per band.
BASE_REFLECTANCE = {name: 0.05 for name in BAND_NAMES}

DEFAULT_NOISE_SIGMA = 0.01
NOISE_SMOOTHING = 12.0  # gaussian_filter sigma, in pixels
# Fraction of the noise level drawn independently per band; the rest is one
# field shared by all bands.
BAND_NOISE_FRACTION = 1.0 / 3.0

# Spectrally flat confounder blobs ("clouds") appear in half of all scenes,
# positive and negative alike.  Their amplitude fraction keeps even the
# largest cloud's mean contribution below the smallest plume's, preserving
# strict separability by the affected-band means.
CLOUD_PROBABILITY = 0.5
CLOUD_AMPLITUDE_FRACTION = 0.2

EPOCH_2019 = datetime(2019, 1, 1, tzinfo=timezone.utc)


@dataclass(frozen=True)
class PlumeParams:
    """Geometry and strength of one synthetic plume blob."""

    center: tuple[float, float] = (60.0, 60.0)  # (row, col)
    major_axis: float = 12.0                    # Gaussian sigma along the plume, px
    minor_axis: float = 6.0                     # Gaussian sigma across the plume, px
    orientation: float = 0.5                    # radians, counter-clockwise
    amplitude: float = 0.5                      # reflectance added at the blob center
    affected_bands: tuple[str, ...] = SMOKE_SENSITIVE_BANDS
    background_noise_sigma: float = DEFAULT_NOISE_SIGMA

    def __post_init__(self):
        if self.major_axis <= 0 or self.minor_axis <= 0:
            raise ValueError("plume axes must be positive")
        if self.amplitude <= 0:
            raise ValueError("plume amplitude must be positive")
        unknown = set(self.affected_bands) - set(BAND_NAMES)
        if unknown:
            raise ValueError(f"unknown bands: {sorted(unknown)}")


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    """Zero-mean smooth noise field with standard deviation `sigma`."""
    field_ = gaussian_filter(rng.standard_normal((size, size)), NOISE_SMOOTHING)
    field_ -= field_.mean()
    std = field_.std()
    if std > 0:
        field_ *= sigma / std
    return field_


def plume_blob(params: PlumeParams, size: int = SCENE_SIZE) -> np.ndarray:
    """Noiseless rotated anisotropic Gaussian blob on a size x size grid."""
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    dr = rows - params.center[0]
    dc = cols - params.center[1]
    cos_t, sin_t = np.cos(params.orientation), np.sin(params.orientation)
    u = cos_t * dr + sin_t * dc
    v = -sin_t * dr + cos_t * dc
    q = (u / params.major_axis) ** 2 + (v / params.minor_axis) ** 2
    return params.amplitude * np.exp(-0.5 * q)


def generate_scene(params: PlumeParams | None, seed: int,
                   site_id: str = "synth", timestamp: datetime = EPOCH_2019,
                   origin: GeoOrigin = GeoOrigin()) -> tuple[Scene, MaskRaster]:
    """Generate one scene and its exact ground-truth mask.

    ``params=None`` produces a negative scene with an all-zero mask.
    The same seed always yields bit-identical outputs.
    """
    rng = np.random.default_rng(seed)
    noise_sigma = params.background_noise_sigma if params else DEFAULT_NOISE_SIGMA
    amplitude = params.amplitude if params else PlumeParams().amplitude
    shared = _smooth_noise(rng, SCENE_SIZE, noise_sigma)
    bands = np.empty((len(BAND_NAMES), SCENE_SIZE, SCENE_SIZE), dtype=np.float64)
    for name in BAND_NAMES:
        bands[BAND_INDEX[name]] = BASE_REFLECTANCE[name] + shared + _smooth_noise(
            rng, SCENE_SIZE, noise_sigma * BAND_NOISE_FRACTION
        )

    if rng.random() < CLOUD_PROBABILITY:
        cloud = sample_plume_params(
            rng, amplitude=amplitude * CLOUD_AMPLITUDE_FRACTION)
        bands += plume_blob(cloud)[None]

    mask = np.zeros((SCENE_SIZE, SCENE_SIZE), dtype=np.uint8)
    if params is not None:
        blob = plume_blob(params)
        for name in params.affected_bands:
            bands[BAND_INDEX[name]] += blob
        mask[blob > params.amplitude / 2.0] = 1

    # quantize to the DN grid so a uint16 write/load round-trips exactly
    bands = np.clip(bands, 0.0, 1.0)
    bands = (np.round(bands * 10000.0) / 10000.0).astype(np.float32)

    scene = Scene(site_id, timestamp, bands, origin=origin)
    return scene, MaskRaster(site_id, timestamp, mask, origin)


def write_scene(scene: Scene, mask: MaskRaster | None, out_dir: Path | str,
                lat: float = 0.0, lon: float = 0.0,
                label: int | None = None) -> dict:
    """Write scene (and mask, when it has smoke) TIFFs; return the manifest row.

    The label defaults to 1 exactly when the mask marks at least one smoke
    pixel.  Callers may force ``label=1`` with no mask to model positives
    that were never annotated.  Paths in the row are relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    has_smoke = mask is not None and bool(mask.values.any())
    if label is None:
        label = 1 if has_smoke else 0
    if label == 0 and has_smoke:
        raise ValueError("cannot write a label-0 row with a non-empty mask")

    stamp = scene.timestamp.strftime("%Y%m%dT%H%M%S")
    scene_name = f"{scene.site_id}_{stamp}.tif"
    raster_io.write_scene(scene, out_dir / scene_name)
    mask_name = ""
    if has_smoke:
        mask_name = f"{scene.site_id}_{stamp}_mask.tif"
        raster_io.write_mask(mask, out_dir / mask_name)
    return {
        "site_id": scene.site_id,
        "lat": f"{lat:.6f}",
        "lon": f"{lon:.6f}",
        "timestamp": raster_io.format_timestamp(scene.timestamp),
        "scene_path": scene_name,
        "label": str(label),
        "mask_path": mask_name,
    }


def sample_plume_params(rng: np.random.Generator,
                        amplitude: float = 0.5,
                        noise_sigma: float = DEFAULT_NOISE_SIGMA) -> PlumeParams:
    """Draw randomized plume geometry, kept away from the scene border."""
    return PlumeParams(
        center=(float(rng.uniform(35, 85)), float(rng.uniform(35, 85))),
        major_axis=float(rng.uniform(10, 18)),
        minor_axis=float(rng.uniform(5, 10)),
        orientation=float(rng.uniform(0, np.pi)),
        amplitude=amplitude,
        background_noise_sigma=noise_sigma,
    )


def generate_dataset(out_dir: Path | str, n_positive: int, n_negative: int,
                     n_sites: int, seed: int = 0,
                     masked_fraction: float = 1.0,
                     amplitude: float = 0.5) -> Path:
    """Generate a full synthetic dataset plus its manifest.csv.

    Scenes are spread over ``n_sites`` sites at deterministic pseudo
    coordinates; ``masked_fraction`` of the positives get mask files
    (the rest keep label 1 without annotation).  Returns the manifest path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    site_ids = [f"site-{i:04d}" for i in range(n_sites)]
    coords = {
        s: (40.0 + float(rng.uniform(-5, 5)), 10.0 + float(rng.uniform(-5, 5)))
        for s in site_ids
    }
    per_site_counter: dict[str, int] = {s: 0 for s in site_ids}

    rows = []
    labels = [1] * n_positive + [0] * n_negative
    n_masked = int(round(masked_fraction * n_positive))
    for k, label in enumerate(labels):
        site = site_ids[int(rng.integers(0, n_sites))]
        per_site_counter[site] += 1
        ts = EPOCH_2019 + timedelta(days=3 * per_site_counter[site], hours=10)
        params = None
        if label == 1:
            params = sample_plume_params(rng, amplitude=amplitude)
        scene_seed = int(rng.integers(0, 2**31))
        scene, mask = generate_scene(params, scene_seed, site_id=site, timestamp=ts)
        write_this_mask = label == 1 and k < n_masked
        lat, lon = coords[site]
        rows.append(
            write_scene(scene, mask if write_this_mask else None, out_dir,
                        lat=lat, lon=lon, label=label)
        )

    manifest_path = out_dir / "manifest.csv"
    from .catalog import write_manifest
    write_manifest(rows, manifest_path)
    return manifest_path
