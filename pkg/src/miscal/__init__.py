"""miscal: red-team toolkit for confidence-calibration attacks, metrics and defences."""

__version__ = "0.1.0"

from .core import (
    AttackBudget,
    ClassifierOracle,
    GradientOracle,
    PredictionRecord,
    ProbVector,
    Sample,
    SeededRng,
    clip_to_ball,
    derive_stream,
)
from .attacks import (
    AttackKind,
    AttackTrace,
    WhiteBoxSettings,
    attack_dataset,
    calibration_attack,
    miscalibration_loss,
    pgd_calibration_attack,
    resolve_direction,
    square_perturb,
)
from .metrics import (
    ReliabilityBins,
    ece,
    ks_error,
    max_ece_bound,
    reliability_bins,
    summary,
)
from .victims import (
    LookupVictim,
    MLPOracle,
    MLPVictim,
    TrainConfig,
    VictimOracle,
    input_gradient,
    predict_proba,
    train_mlp,
)
from .defences import (
    CSConfig,
    PgdTrainSettings,
    TemperatureModel,
    adversarial_train,
    caat_train,
    compression_scale,
    fit_temperature,
)
from .harness import (
    ExperimentConfig,
    RunReport,
    generate_blobs,
    load_csv,
    remote_oracle,
    run_experiment,
)
from .figures import emit_reliability_svg

__all__ = [
    "AttackBudget", "AttackKind", "AttackTrace", "ClassifierOracle", "CSConfig",
    "ExperimentConfig", "GradientOracle", "LookupVictim", "MLPOracle", "MLPVictim",
    "PgdTrainSettings", "PredictionRecord", "ProbVector", "ReliabilityBins",
    "RunReport", "Sample", "SeededRng", "TemperatureModel", "TrainConfig",
    "VictimOracle", "WhiteBoxSettings", "adversarial_train", "attack_dataset",
    "caat_train", "calibration_attack", "clip_to_ball", "compression_scale",
    "derive_stream", "ece", "emit_reliability_svg", "fit_temperature",
    "generate_blobs", "input_gradient", "ks_error", "load_csv", "max_ece_bound",
    "miscalibration_loss", "pgd_calibration_attack", "predict_proba",
    "reliability_bins", "remote_oracle", "resolve_direction", "run_experiment",
    "square_perturb", "summary", "train_mlp",
]
