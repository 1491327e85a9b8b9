"""Reading, resampling, normalizing and writing multi-band scene rasters.

Three on-disk layouts are understood:

* native band directory -- one single-band uint16 TIFF per band, named
  ``B01.tif`` ... ``B12.tif``, each at its native resolution;
* native band container -- one multi-page uint16 TIFF, one page per band,
  pages tagged with the band name (or exactly 12 pages in canonical order);
* canonical scene file -- one single-page TIFF with 12 float32 samples per
  pixel in canonical band order, 120x120, already normalized to [0, 1].

Masks are single-band uint8 TIFFs with values in {0, 1}.  Scene metadata
(site id, timestamp, georeference) travels as a JSON document in the TIFF
ImageDescription tag.
"""

import json
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import tifffile

from .bands import (
    BAND_INDEX,
    REFLECTANCE_SCALE,
    SCENE_SIZE,
    SENTINEL2_BANDS,
    TARGET_RESOLUTION,
    BandSpec,
)
from .errors import (
    BandMissing,
    CropTooLarge,
    ExtentTooSmall,
    FormatError,
    InvalidFactor,
    MaskNotBinary,
)

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
DEFAULT_CRS = "EPSG:32632"


def parse_timestamp(text: str) -> datetime:
    """Parse an ISO-8601 timestamp; naive values are taken as UTC."""
    ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


@dataclass(frozen=True)
class GeoOrigin:
    """Geographic anchor of a raster: CRS code plus top-left corner coordinates."""

    crs: str = DEFAULT_CRS
    easting: float = 0.0
    northing: float = 0.0

    def shifted(self, rows: int, cols: int, pixel_size: float) -> "GeoOrigin":
        """Origin after dropping `rows` top rows and `cols` left columns."""
        return GeoOrigin(
            self.crs,
            self.easting + cols * pixel_size,
            self.northing - rows * pixel_size,
        )


@dataclass(frozen=True)
class Scene:
    """A 12-band reflectance raster with identity and georeference.

    ``bands`` has shape (12, H, W), float32, values in [0, 1], stored
    read-only so scenes can be shared across threads.
    """

    site_id: str
    timestamp: datetime
    bands: np.ndarray
    pixel_size: float = float(TARGET_RESOLUTION)
    origin: GeoOrigin = field(default_factory=GeoOrigin)

    def __post_init__(self):
        arr = np.asarray(self.bands, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[0] != len(SENTINEL2_BANDS):
            raise ValueError(f"bands must be (12, H, W), got {arr.shape}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError("bands must be non-empty")
        if not np.isfinite(arr).all():
            raise ValueError("band values must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("band values must lie in [0, 1]")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "bands", arr)

    @property
    def height(self) -> int:
        return self.bands.shape[1]

    @property
    def width(self) -> int:
        return self.bands.shape[2]

    def band(self, name: str) -> np.ndarray:
        return self.bands[BAND_INDEX[name]]


@dataclass(frozen=True)
class MaskRaster:
    """Binary smoke mask spatially aligned with a Scene (1 = smoke)."""

    site_id: str
    timestamp: datetime
    values: np.ndarray
    origin: GeoOrigin = field(default_factory=GeoOrigin)

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise MaskNotBinary("mask values must be 0 or 1")
        arr = np.ascontiguousarray(arr.astype(np.uint8))
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


# --- elementary raster operations ---


def normalize_reflectance(raw: np.ndarray) -> np.ndarray:
    """Scale raw digital numbers to [0, 1] reflectance (DN / 10000, clamped).

    The no-data sentinel DN 0 maps to reflectance 0.
    """
    scaled = np.asarray(raw, dtype=np.float64) / REFLECTANCE_SCALE
    return np.clip(scaled, 0.0, 1.0).astype(np.float32)


def resample_nearest(plane: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbor upsampling: out[r, c] = plane[r // factor, c // factor]."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise InvalidFactor(f"factor must be a positive integer, got {factor!r}")
    if factor == 1:
        return np.asarray(plane).copy()
    return np.repeat(np.repeat(plane, factor, axis=0), factor, axis=1)


def crop_center_plane(plane: np.ndarray, size: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Centered size x size window of a 2-D plane, plus its (row, col) offset."""
    h, w = plane.shape[-2], plane.shape[-1]
    if size > h or size > w:
        raise CropTooLarge(f"crop {size} exceeds plane {h}x{w}")
    r0 = (h - size) // 2
    c0 = (w - size) // 2
    return plane[..., r0 : r0 + size, c0 : c0 + size], (r0, c0)


def crop_center(scene: Scene, size: int) -> Scene:
    """Centered size x size crop of every band, with the origin shifted to match."""
    cropped, (r0, c0) = crop_center_plane(scene.bands, size)
    return Scene(
        site_id=scene.site_id,
        timestamp=scene.timestamp,
        bands=cropped,
        pixel_size=scene.pixel_size,
        origin=scene.origin.shifted(r0, c0, scene.pixel_size),
    )


def nodata_fraction(scene: Scene, band: str = "B04") -> float:
    """Fraction of exactly-zero pixels in one band (no-data heuristic)."""
    plane = scene.band(band)
    return float(np.count_nonzero(plane == 0.0)) / plane.size


# --- TIFF metadata plumbing ---


def _meta_dict(site_id: str, timestamp: datetime, origin: GeoOrigin,
               pixel_size: float, **extra) -> dict:
    meta = {
        "site_id": site_id,
        "timestamp": format_timestamp(timestamp),
        "crs": origin.crs,
        "easting": origin.easting,
        "northing": origin.northing,
        "pixel_size": pixel_size,
    }
    meta.update(extra)
    return meta


def _parse_meta(description: str | None) -> dict:
    if not description:
        return {}
    try:
        meta = json.loads(description)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return {}
    return meta if isinstance(meta, dict) else {}


def _meta_identity(meta: dict, fallback_id: str) -> tuple[str, datetime, GeoOrigin, float]:
    site_id = meta.get("site_id", fallback_id)
    ts = parse_timestamp(meta["timestamp"]) if "timestamp" in meta else EPOCH
    origin = GeoOrigin(
        meta.get("crs", DEFAULT_CRS),
        float(meta.get("easting", 0.0)),
        float(meta.get("northing", 0.0)),
    )
    pixel_size = float(meta.get("pixel_size", TARGET_RESOLUTION))
    return site_id, ts, origin, pixel_size


# --- scene writing ---


def write_scene(scene: Scene, path: Path | str) -> None:
    """Write the canonical scene file: single page, 12 float32 samples/pixel."""
    path = Path(path)
    data = np.moveaxis(scene.bands, 0, -1)  # (H, W, 12), contiguous samples
    desc = json.dumps(
        _meta_dict(scene.site_id, scene.timestamp, scene.origin, scene.pixel_size),
        sort_keys=True,
    )
    tifffile.imwrite(
        path,
        np.ascontiguousarray(data),
        photometric="minisblack",
        planarconfig="contig",
        description=desc,
    )


def write_band_directory(planes: dict[str, np.ndarray], directory: Path | str,
                         site_id: str = "scene", timestamp: datetime = EPOCH,
                         origin: GeoOrigin = GeoOrigin()) -> None:
    """Write native-form per-band uint16 TIFFs (`B01.tif` ...) into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, plane in planes.items():
        spec = _band_by_name(name)
        desc = json.dumps(
            _meta_dict(site_id, timestamp, origin, spec.native_resolution, band=name),
            sort_keys=True,
        )
        tifffile.imwrite(
            directory / f"{name}.tif",
            np.asarray(plane, dtype=np.uint16),
            photometric="minisblack",
            description=desc,
        )


def write_band_container(planes: dict[str, np.ndarray], path: Path | str,
                         site_id: str = "scene", timestamp: datetime = EPOCH,
                         origin: GeoOrigin = GeoOrigin()) -> None:
    """Write a native-form multi-page uint16 TIFF, one page per band."""
    path = Path(path)
    with tifffile.TiffWriter(path) as writer:
        for name, plane in planes.items():
            spec = _band_by_name(name)
            desc = json.dumps(
                _meta_dict(site_id, timestamp, origin, spec.native_resolution, band=name),
                sort_keys=True,
            )
            writer.write(
                np.asarray(plane, dtype=np.uint16),
                photometric="minisblack",
                description=desc,
            )


def _band_by_name(name: str) -> BandSpec:
    for spec in SENTINEL2_BANDS:
        if spec.name == name:
            return spec
    raise BandMissing(name)


# --- scene loading ---


def load_scene(path: Path | str,
               band_specs: tuple[BandSpec, ...] = SENTINEL2_BANDS) -> Scene:
    """Load a scene from any supported layout.

    Native layouts are resampled to 10 m/px, center-cropped to 120x120,
    stacked in canonical order and normalized to [0, 1] reflectance.
    Canonical files are read back as stored.
    """
    _validate_band_specs(band_specs)
    path = Path(path)
    if path.is_dir():
        planes, meta = _read_band_directory(path, band_specs)
        return _assemble_native(planes, meta, path.name, band_specs)

    if not path.exists():
        raise FormatError(f"no such file: {path}")
    try:
        with tifffile.TiffFile(path) as tif:
            pages = tif.pages
            first = pages[0]
            if len(pages) == 1 and first.samplesperpixel == len(band_specs):
                return _read_canonical(first, path)
            planes, meta = _read_band_pages(pages, band_specs)
    except (tifffile.TiffFileError, ValueError, IndexError) as exc:
        raise FormatError(f"unreadable raster container {path}: {exc}") from exc
    return _assemble_native(planes, meta, path.stem, band_specs)


def _validate_band_specs(band_specs: tuple[BandSpec, ...]) -> None:
    names = [b.name for b in band_specs]
    indices = sorted(b.index for b in band_specs)
    if len(band_specs) != 12 or len(set(names)) != 12 or indices != list(range(12)):
        raise FormatError("band_specs must define 12 unique bands with indices 0-11")


def _read_canonical(page, path: Path) -> Scene:
    if page.dtype != np.float32:
        raise FormatError(f"canonical scene {path} must be float32, got {page.dtype}")
    data = page.asarray()  # (H, W, 12)
    bands = np.moveaxis(data, -1, 0)
    meta = _parse_meta(page.description)
    site_id, ts, origin, pixel_size = _meta_identity(meta, path.stem)
    if bands.shape[1] < SCENE_SIZE or bands.shape[2] < SCENE_SIZE:
        raise ExtentTooSmall(
            f"{path}: canonical scene is {bands.shape[1]}x{bands.shape[2]}, "
            f"need at least {SCENE_SIZE}"
        )
    bands, (r0, c0) = crop_center_plane(bands, SCENE_SIZE)
    try:
        return Scene(site_id, ts, bands, pixel_size, origin.shifted(r0, c0, pixel_size))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _read_band_directory(directory: Path, band_specs) -> tuple[dict, dict]:
    planes: dict[str, np.ndarray] = {}
    meta: dict = {}
    for spec in band_specs:
        candidates = [directory / f"{spec.name}.tif", directory / f"{spec.name}.tiff"]
        found = next((c for c in candidates if c.exists()), None)
        if found is None:
            raise BandMissing(spec.name)
        try:
            with tifffile.TiffFile(found) as tif:
                page = tif.pages[0]
                planes[spec.name] = page.asarray()
                if not meta:
                    meta = _parse_meta(page.description)
        except (tifffile.TiffFileError, ValueError, IndexError) as exc:
            raise FormatError(f"unreadable band file {found}: {exc}") from exc
    return planes, meta


def _read_band_pages(pages, band_specs) -> tuple[dict, dict]:
    by_name: dict[str, np.ndarray] = {}
    meta: dict = {}
    unnamed = []
    for page in pages:
        page_meta = _parse_meta(page.description)
        if not meta and page_meta:
            meta = page_meta
        name = page_meta.get("band")
        if name is not None:
            by_name[name] = page.asarray()
        else:
            unnamed.append(page.asarray())
    if not by_name and len(unnamed) == len(band_specs):
        # untagged container: pages are taken in canonical order
        ordered = sorted(band_specs, key=lambda b: b.index)
        by_name = {spec.name: plane for spec, plane in zip(ordered, unnamed)}
    for spec in band_specs:
        if spec.name not in by_name:
            raise BandMissing(spec.name)
    return by_name, meta


def _assemble_native(planes: dict[str, np.ndarray], meta: dict, fallback_id: str,
                     band_specs) -> Scene:
    site_id, ts, origin, _ = _meta_identity(meta, fallback_id)
    stack = np.empty((len(band_specs), SCENE_SIZE, SCENE_SIZE), dtype=np.float32)
    offset = (0, 0)
    for spec in sorted(band_specs, key=lambda b: b.index):
        plane = np.asarray(planes[spec.name])
        if plane.ndim != 2:
            raise FormatError(f"band {spec.name} is not a single-band plane")
        if not np.issubdtype(plane.dtype, np.integer):
            raise FormatError(
                f"band {spec.name} has dtype {plane.dtype}, expected integer DN"
            )
        factor = spec.native_resolution // TARGET_RESOLUTION
        min_px = SCENE_SIZE // factor  # pixels covering 1200 m at native resolution
        if plane.shape[0] < min_px or plane.shape[1] < min_px:
            raise ExtentTooSmall(
                f"band {spec.name}: {plane.shape[0]}x{plane.shape[1]} px at "
                f"{spec.native_resolution} m/px covers less than 1200 m"
            )
        resampled = resample_nearest(plane, factor)
        cropped, offset = crop_center_plane(resampled, SCENE_SIZE)
        stack[spec.index] = normalize_reflectance(cropped)
    origin = origin.shifted(offset[0], offset[1], TARGET_RESOLUTION)
    return Scene(site_id, ts, stack, float(TARGET_RESOLUTION), origin)


# --- masks ---


def write_mask(mask: MaskRaster, path: Path | str) -> None:
    desc = json.dumps(
        _meta_dict(mask.site_id, mask.timestamp, mask.origin, TARGET_RESOLUTION),
        sort_keys=True,
    )
    tifffile.imwrite(
        Path(path),
        mask.values,
        photometric="minisblack",
        description=desc,
    )


def read_mask(path: Path | str) -> MaskRaster:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"no such file: {path}")
    try:
        with tifffile.TiffFile(path) as tif:
            page = tif.pages[0]
            values = page.asarray()
            meta = _parse_meta(page.description)
    except (tifffile.TiffFileError, ValueError, IndexError) as exc:
        raise FormatError(f"unreadable mask file {path}: {exc}") from exc
    if values.ndim != 2:
        raise FormatError(f"mask {path} is not single-band")
    if not np.isin(values, (0, 1)).all():
        raise MaskNotBinary(f"mask {path} contains values outside {{0, 1}}")
    site_id, ts, origin, _ = _meta_identity(meta, path.stem)
    return MaskRaster(site_id, ts, values, origin)
