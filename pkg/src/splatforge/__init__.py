"""splatforge: differentiable Gaussian-splat rendering and training."""

__version__ = "0.1.0"

from .scene import (
    Camera,
    Gaussian,
    Image,
    InvalidInputError,
    Scene,
    Violation,
    build_covariance,
    dequantize,
    quantize,
    quat_to_rotmat,
    validate_scene,
)
from .cameras import (
    CropSpec,
    PerturbSpec,
    crop_camera,
    expand_training_camera,
    perturb_camera,
    zoom_in_camera,
)
from .rasterize import (
    FilterSpec,
    ParamGradients,
    RenderOutput,
    Splat2D,
    apply_filter,
    project_gaussian,
    render,
    render_backward,
)
from .metrics import MetricReport, evaluate_pairs, psnr, ssim, ssim_with_grad
from .io import (
    ParseError,
    read_cameras,
    read_dataset,
    read_image,
    read_ply,
    write_cameras,
    write_image,
    write_ply,
)
from .synth import look_at, orbit_cameras, random_scene
from .resampling import (
    FlexibilityThresholds,
    WeightKernel,
    chebyshev_sample_size,
    concentration_trial,
    downsample_image,
    interp_distance,
    noise_averaging_compare,
    render_interp_consistency,
    rounding_flexible,
    weighted_downsample,
    within_flexibility_bound,
)
from .pseudo_gt import (
    ProtocolError,
    RemoteDiffusionClient,
    RemoteDiffusionConfig,
    SynthesisUnavailableError,
    SynthesizerRequest,
    SyntheticBackend,
    SyntheticBackendSpec,
    bootstrap_regenerate,
    synthesize,
)
from .training import (
    DensifySpec,
    LossWeights,
    OptimizerSpec,
    PseudoGTSpec,
    Schedule,
    StagedWeights,
    TrainConfig,
    TrainResult,
    TrainingDivergedError,
    load_checkpoint,
    load_config,
    loss_bootstrap,
    loss_hybrid,
    loss_upscale,
    phase_of,
    save_checkpoint,
    save_config,
    train,
)
from .estimator import GaussianSplatting
from .verify import run_suites

__all__ = [
    "Camera", "Gaussian", "Image", "InvalidInputError", "Scene", "Violation",
    "build_covariance", "dequantize", "quantize", "quat_to_rotmat",
    "validate_scene",
    "CropSpec", "PerturbSpec", "crop_camera", "expand_training_camera",
    "perturb_camera", "zoom_in_camera",
    "FilterSpec", "ParamGradients", "RenderOutput", "Splat2D", "apply_filter",
    "project_gaussian", "render", "render_backward",
    "MetricReport", "evaluate_pairs", "psnr", "ssim", "ssim_with_grad",
    "ParseError", "read_cameras", "read_dataset", "read_image", "read_ply",
    "write_cameras", "write_image", "write_ply",
    "look_at", "orbit_cameras", "random_scene",
    "FlexibilityThresholds", "WeightKernel", "chebyshev_sample_size",
    "concentration_trial", "downsample_image", "interp_distance",
    "noise_averaging_compare", "render_interp_consistency",
    "rounding_flexible", "weighted_downsample", "within_flexibility_bound",
    "ProtocolError", "RemoteDiffusionClient", "RemoteDiffusionConfig",
    "SynthesisUnavailableError", "SynthesizerRequest", "SyntheticBackend",
    "SyntheticBackendSpec", "bootstrap_regenerate", "synthesize",
    "DensifySpec", "LossWeights", "OptimizerSpec", "PseudoGTSpec", "Schedule",
    "StagedWeights", "TrainConfig", "TrainResult", "TrainingDivergedError",
    "load_checkpoint", "load_config", "loss_bootstrap", "loss_hybrid",
    "loss_upscale", "phase_of", "save_checkpoint", "save_config", "train",
    "GaussianSplatting", "run_suites",
    "__version__",
]
