"""Detect and repair corrupted steps in trajectory datasets.

A detector diffusion model is trained on the partially corrupted data with an
anchored objective that tolerates the corruption, its noise-prediction
magnitude flags the corrupted steps, a second diffusion model is trained on
the remaining clean slices with column masking, and the flagged steps are
rewritten from its reverse process.
"""

from .ambient import AmbientTrainConfig, ambient_loss, sample_ambient_pair, train_detector
from .corrupt import CorruptionSpec, apply_corruption
from .data import (
    ChannelLayout,
    CorruptionMask,
    SliceWindow,
    TrajectoryDataset,
    destandardize,
    generate_synthetic,
    per_dim_std,
    slice_at,
    standardize,
)
from .denoise import (
    DenoiserTrainConfig,
    RecoveryConfig,
    recover_dataset,
    recover_slice,
    selective_ddpm_loss,
    train_denoiser,
)
from .detect import (
    DetectionReport,
    build_report,
    classify_and_split,
    detection_metrics,
    rescale_scores,
    score_sample,
)
from .errors import ConfigError, DataError, DivergenceError, TrajcleanError
from .nnet import (
    PredictorConfig,
    PredictorParams,
    finite_difference_check,
    init_predictor,
    predict_noise,
    train_step,
)
from .pipeline import RunConfig, compare_detectors, run_pipeline, run_pipeline_data, sweep_threshold
from .schedule import (
    AmbientCoefficients,
    BridgeCoefficients,
    VarianceSchedule,
    ambient_coefficients,
    bridge_coefficients,
    build_vp_schedule,
)
from .theory import (
    GapQuery,
    kl_forward_gap,
    kl_monte_carlo,
    min_ambient_timestep,
    prediction_snr,
    snr_kl_table,
)

__version__ = "0.1.0"

__all__ = [
    "AmbientCoefficients",
    "AmbientTrainConfig",
    "BridgeCoefficients",
    "ChannelLayout",
    "ConfigError",
    "CorruptionMask",
    "CorruptionSpec",
    "DataError",
    "DenoiserTrainConfig",
    "DetectionReport",
    "DivergenceError",
    "GapQuery",
    "PredictorConfig",
    "PredictorParams",
    "RecoveryConfig",
    "RunConfig",
    "SliceWindow",
    "TrajcleanError",
    "TrajectoryDataset",
    "VarianceSchedule",
    "ambient_coefficients",
    "ambient_loss",
    "apply_corruption",
    "bridge_coefficients",
    "build_report",
    "build_vp_schedule",
    "classify_and_split",
    "compare_detectors",
    "destandardize",
    "detection_metrics",
    "finite_difference_check",
    "generate_synthetic",
    "init_predictor",
    "kl_forward_gap",
    "kl_monte_carlo",
    "min_ambient_timestep",
    "per_dim_std",
    "predict_noise",
    "prediction_snr",
    "recover_dataset",
    "recover_slice",
    "rescale_scores",
    "run_pipeline",
    "run_pipeline_data",
    "sample_ambient_pair",
    "score_sample",
    "selective_ddpm_loss",
    "slice_at",
    "snr_kl_table",
    "standardize",
    "sweep_threshold",
    "train_denoiser",
    "train_detector",
    "train_step",
]
