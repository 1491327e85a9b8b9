"""Sentinel-2 L2A band definitions and the canonical 12-band stack order."""

from dataclasses import dataclass


@dataclass(frozen=True)
class BandSpec:
    """One spectral band: its name, native ground resolution, and stack position."""

    name: str
    native_resolution: int  # meters per pixel: 10, 20 or 60
    index: int              # position in the canonical 12-band stack


# Canonical stack order. L2A products omit the cirrus band B10, so "channel N"
# counts through this list: channel 1 = B01, channel 9 = B09, channel 11 = B11.
SENTINEL2_BANDS: tuple[BandSpec, ...] = (
    BandSpec("B01", 60, 0),
    BandSpec("B02", 10, 1),
    BandSpec("B03", 10, 2),
    BandSpec("B04", 10, 3),
    BandSpec("B05", 20, 4),
    BandSpec("B06", 20, 5),
    BandSpec("B07", 20, 6),
    BandSpec("B08", 10, 7),
    BandSpec("B8A", 20, 8),
    BandSpec("B09", 60, 9),
    BandSpec("B11", 20, 10),
    BandSpec("B12", 20, 11),
)

BAND_NAMES: tuple[str, ...] = tuple(b.name for b in SENTINEL2_BANDS)
BAND_INDEX: dict[str, int] = {b.name: b.index for b in SENTINEL2_BANDS}

# L2A reflectance quantification: raw digital number / 10000 = reflectance.
REFLECTANCE_SCALE = 10000

# Ingested scenes are square crops of this many pixels at TARGET_RESOLUTION.
TARGET_RESOLUTION = 10   # meters per pixel
SCENE_SIZE = 120         # pixels (1200 m edge length)

# Bands where smoke expresses most strongly (aerosols, water vapor, SWIR-1).
SMOKE_SENSITIVE_BANDS: tuple[str, str, str] = ("B01", "B09", "B11")
