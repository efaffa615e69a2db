"""Data model, file formats and image operators."""

from .imaging import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    AugmentConfig,
    augment,
    gaussian_blur,
    gaussian_kernel,
    mirror_expand,
    normalize_zscore,
    prepare_image,
)
from .io import (
    MANIFEST_HEADER,
    PREDICTION_HEADER,
    FormatError,
    load_manifest,
    read_payload,
    read_predictions,
    write_manifest,
    write_payload,
    write_predictions,
)
from .types import (
    JOINT_DISPLAY_NAMES,
    JOINT_DISPLAY_ORDER,
    JOINT_NAMES,
    N_AGE_BINS,
    SPLIT_ROLES,
    TASKS,
    Case,
    DatasetManifest,
    LabelVector,
    PredictionRecord,
    ValidationError,
    age_to_bin,
    joint_index,
    joint_index_array,
)
