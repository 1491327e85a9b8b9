"""Satellite smoke-plume detection over 12-band reflectance scenes.

End-to-end library: raster ingestion and resampling, labeled-sample
catalogs with location-disjoint splits, paired geometric augmentation,
a 12-channel residual classifier and U-Net segmenter, deterministic
training with best-epoch selection, evaluation metrics with per-band
gradient attribution, synthetic scene generation, and rendering.
"""

from .bands import (BAND_INDEX, BAND_NAMES, REFLECTANCE_SCALE, SCENE_SIZE,
                    SENTINEL2_BANDS, SMOKE_SENSITIVE_BANDS, TARGET_RESOLUTION,
                    BandSpec)
from .errors import (ArchMismatch, BandMissing, CannotBalance, ConfigError,
                     CorruptCheckpoint, CropTooLarge, EmptyEvaluation,
                     ExtentTooSmall, FormatError, InvalidFactor, InvalidTarget,
                     LabelMaskConflict, LengthMismatch, ManifestError,
                     MaskNotBinary, NonSquare, PairMismatch, RecordLoadError,
                     ShapeMismatch, SmokePlumeError, TooFewSites,
                     TrainingDiverged)
from .raster_io import (GeoOrigin, MaskRaster, Scene, crop_center, load_scene,
                        normalize_reflectance, read_mask, resample_nearest,
                        write_mask, write_scene)
from .augment import TransformPolicy, apply_pair, flip_h, flip_v, rot90
from .catalog import (SampleRecord, SplitManifest, assign_splits,
                      balance_by_duplication, batches, build_catalog,
                      read_split_manifest, write_split_manifest)
from .models import (ClassifierConfig, ModelCheckpoint, PlumeClassifier,
                     PlumeSegmenter, SegmenterConfig, build_classifier,
                     build_segmenter, extract_activation_map, load_checkpoint,
                     save_checkpoint)
from .training import (SGDMomentum, TrainConfig, bce_with_logits,
                       sgd_momentum_step, train_classifier, train_segmenter)
from .metrics import (ConfusionCounts, MetricsReport, accuracy,
                      channel_gradient_importance, confusion,
                      evaluate_classification, evaluate_segmentation, iou)
from .synth import PlumeParams, generate_dataset, generate_scene
from .viz import (RenderSpec, activation_overlay, false_color, overlay_masks,
                  save_png, true_color)
from .config import RunConfig, load_config, parse_config

__version__ = "0.1.0"
