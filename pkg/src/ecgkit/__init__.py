"""ECG heartbeat classification toolkit.

Reads MIT-BIH style WFDB records, segments and normalizes heartbeats,
balances minority classes with a per-class GAN, trains four 1D deep
architectures on a small numpy autodiff kernel, fuses them into ensembles,
and writes evaluation reports with saliency maps.
"""

__version__ = "0.1.0"

from .errors import (
    AugmentError,
    ConfigError,
    EcgkitError,
    FormatError,
    IoError,
    MetricError,
    NumericalError,
    ParseError,
    ShapeError,
    SplitError,
    UsageError,
)

from .beats import (
    CLASS_NAMES,
    DEFAULT_BEAT_LEN,
    BeatDataset,
    BeatRecord,
    load_records_dir,
    normalize_beat,
    read_beats_csv,
    segment_beats,
    stratified_split,
    write_beats_csv,
)
from .checkpoint import load_checkpoint, peek_checkpoint, save_checkpoint
from .config import (
    PipelineConfig,
    RunManifest,
    config_hash,
    derive_seed,
    load_config,
    thread_cap,
)
from .ensemble import (
    EnsembleSpec,
    LogitSet,
    ManifestEntry,
    build_strategy,
    fuse,
    load_manifest,
    predict_classes,
    rank_members,
    top2_weights,
    write_manifest,
)
from .gan import (
    DiscriminatorNet,
    GanTrainConfig,
    GeneratorNet,
    balance_dataset,
    gan_train,
    synthesize,
)
from .gradcam import SaliencyMap, grad_cam
from .metrics import (
    ConfidenceInterval,
    ConfusionMatrix,
    MetricBundle,
    RocCurve,
    bootstrap_ci,
    confusion,
    evaluate_predictions,
    one_vs_rest_auc,
    prf1,
    roc_auc,
    run_level_ci,
)
from .models import Model, ModelDescriptor, build
from .report import render_report
from .training import (
    AdamW,
    EpochRecord,
    FocalLossConfig,
    PlateauScheduler,
    TrainingHistory,
    TrainRunConfig,
    focal_loss,
    train,
)
from .cli import main, run

__all__ = [
    "AdamW",
    "AugmentError",
    "BeatDataset",
    "BeatRecord",
    "CLASS_NAMES",
    "ConfidenceInterval",
    "ConfigError",
    "ConfusionMatrix",
    "DEFAULT_BEAT_LEN",
    "DiscriminatorNet",
    "EcgkitError",
    "EnsembleSpec",
    "EpochRecord",
    "FocalLossConfig",
    "FormatError",
    "GanTrainConfig",
    "GeneratorNet",
    "IoError",
    "LogitSet",
    "ManifestEntry",
    "MetricBundle",
    "MetricError",
    "Model",
    "ModelDescriptor",
    "NumericalError",
    "ParseError",
    "PipelineConfig",
    "PlateauScheduler",
    "RocCurve",
    "RunManifest",
    "SaliencyMap",
    "ShapeError",
    "SplitError",
    "TrainRunConfig",
    "TrainingHistory",
    "UsageError",
    "__version__",
    "balance_dataset",
    "bootstrap_ci",
    "build",
    "build_strategy",
    "config_hash",
    "confusion",
    "derive_seed",
    "evaluate_predictions",
    "focal_loss",
    "fuse",
    "gan_train",
    "grad_cam",
    "load_checkpoint",
    "load_config",
    "load_manifest",
    "load_records_dir",
    "main",
    "normalize_beat",
    "one_vs_rest_auc",
    "peek_checkpoint",
    "predict_classes",
    "prf1",
    "rank_members",
    "read_beats_csv",
    "render_report",
    "roc_auc",
    "run",
    "run_level_ci",
    "save_checkpoint",
    "segment_beats",
    "stratified_split",
    "synthesize",
    "thread_cap",
    "top2_weights",
    "train",
    "write_beats_csv",
    "write_manifest",
]
