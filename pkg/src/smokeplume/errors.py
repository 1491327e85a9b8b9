"""Exception types raised across the smokeplume pipeline."""


class SmokePlumeError(Exception):
    """Base class for all errors raised by this package."""


# --- raster_io ---

class FormatError(SmokePlumeError):
    """Raster container is unreadable or has an unsupported layout."""


class BandMissing(SmokePlumeError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"band {name} missing from raster container")


class ExtentTooSmall(SmokePlumeError):
    """Source raster covers less than the required ground extent."""


class InvalidFactor(SmokePlumeError):
    """Resampling factor must be a positive integer."""


class CropTooLarge(SmokePlumeError):
    """Requested crop exceeds the source dimensions."""


class MaskNotBinary(SmokePlumeError):
    """Mask raster contains values other than 0 and 1."""


# --- catalog ---

class ManifestError(SmokePlumeError):
    def __init__(self, row: int, reason: str):
        self.row = row
        self.reason = reason
        super().__init__(f"manifest row {row}: {reason}")


class LabelMaskConflict(SmokePlumeError):
    """A negative-labelled record carries a segmentation mask."""


class TooFewSites(SmokePlumeError):
    """Splitting needs at least three distinct sites."""


class CannotBalance(SmokePlumeError):
    """Class balancing needs at least one record of each class."""


class RecordLoadError(SmokePlumeError):
    """A scene referenced by a catalog record failed to load."""

    def __init__(self, site_id: str, timestamp, path, cause: Exception):
        self.site_id = site_id
        self.timestamp = timestamp
        self.path = path
        super().__init__(f"record {site_id} @ {timestamp} ({path}): {cause}")


# --- augment ---

class NonSquare(SmokePlumeError):
    """Rotation by 90 degrees requires a square spatial grid."""


class PairMismatch(SmokePlumeError):
    """Scene and mask spatial shapes disagree."""


# --- models ---

class CorruptCheckpoint(SmokePlumeError):
    """Checkpoint archive is truncated or malformed."""


class ArchMismatch(SmokePlumeError):
    """Checkpoint tensors do not fit the target architecture."""


# --- training ---

class InvalidTarget(SmokePlumeError):
    """Classification/segmentation targets must be 0 or 1."""


class TrainingDiverged(SmokePlumeError):
    def __init__(self, epoch: int, log: list | None = None):
        self.epoch = epoch
        self.log = log or []  # per-epoch entries completed before divergence
        super().__init__(f"loss became non-finite in epoch {epoch}")


# --- metrics ---

class LengthMismatch(SmokePlumeError):
    """Prediction and label sequences differ in length."""


class ShapeMismatch(SmokePlumeError):
    """Arrays that must be spatially aligned have different shapes."""


class EmptyEvaluation(SmokePlumeError):
    """No samples available to evaluate."""


# --- config / cli ---

class ConfigError(SmokePlumeError):
    """Run configuration file is malformed or contains unknown keys."""
