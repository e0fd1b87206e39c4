"""Epicardial adipose tissue segmentation and quantification from cardiac CT.

Pipeline: threshold the adipose HU band, pair each slice with a constant
normalized-depth plane, train a 2-channel U-Net to segment the pericardium
with a smoothed Dice loss, derive the EAT mask as threshold AND pericardium,
then quantify per-slice pixel counts and their agreement with reference
labels.
"""

from .augment import AugmentOutcome, AugmentPolicy, augment_sample, mesh_deform, sample_rng
from .config import EvaluateOptions, PathsConfig, QuantifyOptions, RunConfig, load_run_config
from .data import (
    CtSlice,
    CtStudy,
    DatasetManifest,
    FoldSplit,
    ManifestEntry,
    MaskPair,
    load_manifest,
    load_study,
    save_study,
    split_folds,
    write_manifest,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DataLeakError,
    DivergenceError,
    EatsegError,
    ManifestError,
    MissingAssetError,
    UndefinedCorrelationError,
)
from .evaluate import (
    BlandAltmanResult,
    EvalReport,
    SliceMetrics,
    bland_altman,
    build_report,
    emit_plots,
    overlap_metrics,
    pearson,
)
from .model import (
    Checkpoint,
    PericardiumUNet,
    SegModelConfig,
    build_model,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from .phantom import PhantomConfig, build_phantom_study, generate_phantom
from .preprocess import (
    PreprocessConfig,
    RemovalReport,
    TrainSample,
    build_dataset_samples,
    build_sample,
    filter_empty_slices,
    normalized_depth,
    threshold_adipose,
)
from .quantify import (
    BiasCorrection,
    EatQuantification,
    adjusted_count,
    aggregate_counts,
    count_eat_pixels,
    derive_eat,
    fit_bias_correction,
)
from .training import (
    DiceLossConfig,
    TrainConfig,
    TrainRunRecord,
    cross_validate,
    dice_loss,
    train_fold,
)

__version__ = "0.1.0"
