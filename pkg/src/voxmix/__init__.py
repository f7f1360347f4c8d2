"""Spatially varying Gaussian mixture fitting for dense 3D volumes."""

from voxmix.bandwidth import (
    BandwidthPlan,
    BandwidthSelection,
    Pilot,
    SpeCurve,
    default_cv_schedule,
    default_reg_schedule,
    filter_size_for,
    select_bandwidth,
    select_cv,
    select_reg,
)
from voxmix.baselines import (
    GlobalGaussianMixture,
    GlobalTheta,
    ScalarKMeans,
    gmm_fit_global,
    kmeans,
    kmeans_theta,
)
from voxmix.kem import (
    FitConfig,
    FitResult,
    LocalGaussianMixture,
    Responsibilities,
    e_step,
    hard_labels,
    kem_fit,
    posterior_volume,
    predict_response,
)
from voxmix.kernel import KernelSpec, make_kernel, weighted_conv
from voxmix.metrics import EvalReport, accuracy, prediction_error, rmse_field
from voxmix.phantom import PhantomData, PhantomSpec, generate_phantom
from voxmix.volume import (
    LabelVolume,
    ParameterField,
    SampleMask,
    Volume3D,
    VoxelCoord,
    apply_mask,
    denormalize,
    load_labels,
    load_mhd,
    load_volume,
    normalize_to_unit,
    split_train_test,
    store_labels,
    store_volume,
    subsample_mask,
)

__version__ = "0.1.0"

__all__ = [
    "Volume3D",
    "VoxelCoord",
    "LabelVolume",
    "SampleMask",
    "ParameterField",
    "load_volume",
    "store_volume",
    "load_labels",
    "store_labels",
    "load_mhd",
    "normalize_to_unit",
    "denormalize",
    "apply_mask",
    "split_train_test",
    "subsample_mask",
    "KernelSpec",
    "make_kernel",
    "weighted_conv",
    "FitConfig",
    "FitResult",
    "Responsibilities",
    "LocalGaussianMixture",
    "kem_fit",
    "e_step",
    "hard_labels",
    "posterior_volume",
    "predict_response",
    "GlobalTheta",
    "ScalarKMeans",
    "GlobalGaussianMixture",
    "kmeans",
    "kmeans_theta",
    "gmm_fit_global",
    "Pilot",
    "BandwidthPlan",
    "SpeCurve",
    "BandwidthSelection",
    "default_cv_schedule",
    "default_reg_schedule",
    "select_bandwidth",
    "select_cv",
    "select_reg",
    "filter_size_for",
    "PhantomSpec",
    "PhantomData",
    "generate_phantom",
    "EvalReport",
    "accuracy",
    "prediction_error",
    "rmse_field",
]
