"""Optimization loop: hybrid loss, interval scheduling, densification.

The trainer alternates three supervision sources. Every step compares a
rendered training view against its ground-truth image (the original loss).
Inside periodic sub-windows it additionally compares renders of cropped /
perturbed cameras against cached pseudo ground truth: regenerated views
(bootstrap term) and upscaled zoom crops (upscale term). The caches are
refreshed at interval boundaries and are the only place quantization
happens; all loss arithmetic runs in float after dequantization.
"""

import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .cameras import CropSpec, PerturbSpec, crop_camera, expand_training_camera, zoom_in_camera
from .metrics import psnr, ssim, ssim_with_grad
from .pseudo_gt import (
    DEFAULT_BOOTSTRAP_PROMPT,
    DEFAULT_UPSCALE_PROMPT,
    RemoteDiffusionClient,
    RemoteDiffusionConfig,
    SynthesisUnavailableError,
    SynthesizerRequest,
    SyntheticBackend,
    SyntheticBackendSpec,
    synthesize_many,
)
from .rasterize import FilterSpec, ParamGradients, clamp_min_scales, render, render_backward
from .rng import stream
from .scene import (
    Camera,
    Image,
    InvalidInputError,
    Scene,
    dequantize_array,
    quantize_array,
    quat_to_rotmat,
    sigmoid,
    validate_scene,
)
from .synth import random_scene

logger = logging.getLogger("splatforge.training")

SPLIT_FACTOR = 1.6

PARAM_GROUPS = ("positions", "log_scales", "rotations", "opacity_logits", "colors")


class TrainingDivergedError(RuntimeError):
    """Raised when a training step produces a non-finite loss or gradient."""


# ---------------------------------------------------------------------------
# Loss weights


@dataclass(frozen=True)
class LossWeights:
    """Resolved per-iteration weights of the hybrid loss."""

    lambda_boot: float = 0.15
    lambda_up: float = 0.1
    lambda_dssim: float = 0.2

    def __post_init__(self):
        if self.lambda_boot < 0 or self.lambda_up < 0:
            raise InvalidInputError("loss weights must be >= 0")
        if self.lambda_boot + self.lambda_up >= 1:
            raise InvalidInputError(
                "lambda_boot + lambda_up must stay below 1 so the original "
                "loss keeps a positive coefficient")
        if not 0 <= self.lambda_dssim <= 1:
            raise InvalidInputError("lambda_dssim must lie in [0, 1]")


@dataclass(frozen=True)
class StagedWeights:
    """Two-stage weight pairs, switching at the bootstrap window midpoint.

    Each pair is (early value, late value). Both pairs switch together when
    the iteration passes the midpoint of the bootstrap window; before the
    window the early values apply.
    """

    boot: tuple = (0.15, 0.1)
    up: tuple = (0.1, 0.05)
    lambda_dssim: float = 0.2

    def __post_init__(self):
        for name, pair in (("boot", self.boot), ("up", self.up)):
            if len(pair) != 2 or any(v < 0 for v in pair):
                raise InvalidInputError(
                    f"{name} must be a pair of non-negative weights")
        for k in range(2):
            if self.boot[k] + self.up[k] >= 1:
                raise InvalidInputError(
                    "stage weights must sum below 1 in both stages")
        if not 0 <= self.lambda_dssim <= 1:
            raise InvalidInputError("lambda_dssim must lie in [0, 1]")

    def at(self, iteration: int, schedule: "Schedule") -> LossWeights:
        """Weights in effect at `iteration` (divisor applied to the schedule)."""
        eff = schedule.effective()
        midpoint = (eff.boot_start + eff.boot_end) // 2
        k = 0 if iteration < midpoint else 1
        return LossWeights(float(self.boot[k]), float(self.up[k]),
                           float(self.lambda_dssim))


# ---------------------------------------------------------------------------
# Schedule and phases


def _scaled_count(value: int, divisor: int, floor_one: bool) -> int:
    scaled = int(math.floor(value / divisor + 0.5))
    return max(1, scaled) if floor_one else scaled


@dataclass(frozen=True)
class Schedule:
    """Iteration windows for the bootstrap / upscale / densify phases.

    All fields are stored at full scale; `divisor` shrinks every window
    proportionally for desk-scale runs (rounded, intervals kept >= 1).
    """

    total_iters: int = 40000
    boot_start: int = 20000
    boot_end: int = 38000
    boot_interval: int = 2000
    boot_active: int = 750
    up_start: int = 22000
    up_end: int = 38000
    up_interval: int = 2000
    up_active: int = 1000
    densify_start: int = 1500
    densify_end: int = 25000
    densify_interval: int = 100
    divisor: int = 1

    def __post_init__(self):
        if self.divisor < 1:
            raise InvalidInputError("divisor must be >= 1")
        if self.total_iters < 1:
            raise InvalidInputError("total_iters must be >= 1")
        windows = (("boot", self.boot_start, self.boot_end),
                   ("up", self.up_start, self.up_end),
                   ("densify", self.densify_start, self.densify_end))
        for name, start, end in windows:
            if start < 0 or not start < end <= self.total_iters:
                raise InvalidInputError(
                    f"{name} window must satisfy 0 <= start < end <= total")
        actives = (("boot", self.boot_interval, self.boot_active),
                   ("up", self.up_interval, self.up_active))
        for name, interval, active in actives:
            if interval < 1 or not 1 <= active <= interval:
                raise InvalidInputError(
                    f"{name} active span must satisfy 1 <= active <= interval")
        if self.densify_interval < 1:
            raise InvalidInputError("densify_interval must be >= 1")

    def effective(self) -> "Schedule":
        """The schedule with the divisor applied (divisor 1 afterwards).

        Raises InvalidInputError if the divisor is so coarse that a window
        rounds down to nothing.
        """
        if self.divisor == 1:
            return self
        d = self.divisor
        try:
            return self._scaled(d)
        except InvalidInputError as exc:
            raise InvalidInputError(
                f"divisor {d} collapses a schedule window: {exc}") from exc

    def _scaled(self, d: int) -> "Schedule":
        return Schedule(
            total_iters=_scaled_count(self.total_iters, d, True),
            boot_start=_scaled_count(self.boot_start, d, False),
            boot_end=_scaled_count(self.boot_end, d, False),
            boot_interval=_scaled_count(self.boot_interval, d, True),
            boot_active=_scaled_count(self.boot_active, d, True),
            up_start=_scaled_count(self.up_start, d, False),
            up_end=_scaled_count(self.up_end, d, False),
            up_interval=_scaled_count(self.up_interval, d, True),
            up_active=_scaled_count(self.up_active, d, True),
            densify_start=_scaled_count(self.densify_start, d, False),
            densify_end=_scaled_count(self.densify_end, d, False),
            densify_interval=_scaled_count(self.densify_interval, d, True),
            divisor=1,
        )


@dataclass(frozen=True)
class Phase:
    """Which periodic loss terms are active at one iteration."""

    bootstrap: bool
    upscale: bool

    @property
    def name(self) -> str:
        if self.bootstrap and self.upscale:
            return "both"
        if self.bootstrap:
            return "bootstrap-active"
        if self.upscale:
            return "upscale-active"
        return "plain"


def _window_active(iteration: int, start: int, end: int,
                   interval: int, active: int) -> bool:
    if not start <= iteration < end:
        return False
    return (iteration - start) % interval < active


def phase_of(iteration: int, schedule: Schedule) -> Phase:
    """Phase at `iteration`; the schedule's divisor is applied first."""
    eff = schedule.effective()
    if not 0 <= iteration < eff.total_iters:
        raise InvalidInputError(
            f"iteration {iteration} outside [0, {eff.total_iters})")
    boot = _window_active(iteration, eff.boot_start, eff.boot_end,
                          eff.boot_interval, eff.boot_active)
    up = _window_active(iteration, eff.up_start, eff.up_end,
                        eff.up_interval, eff.up_active)
    return Phase(bootstrap=boot, upscale=up)


# ---------------------------------------------------------------------------
# Remaining configuration blocks


@dataclass(frozen=True)
class DensifySpec:
    """Thresholds controlling clone / split / prune."""

    grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    split_scale: float = 0.05
    max_gaussians: int = 50000

    def __post_init__(self):
        if self.grad_threshold <= 0 or self.prune_opacity <= 0:
            raise InvalidInputError("densify thresholds must be > 0")
        if self.split_scale <= 0:
            raise InvalidInputError("split_scale must be > 0")
        if self.max_gaussians < 1:
            raise InvalidInputError("max_gaussians must be >= 1")


@dataclass(frozen=True)
class OptimizerSpec:
    """Adam moments with per-group learning rates.

    The position rate decays exponentially from lr_position to
    lr_position_final over the run; the other groups use fixed rates.
    """

    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    def __post_init__(self):
        rates = (self.lr_position, self.lr_position_final, self.lr_color,
                 self.lr_opacity, self.lr_scale, self.lr_rotation)
        if any(r <= 0 for r in rates):
            raise InvalidInputError("learning rates must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidInputError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise InvalidInputError("eps must be > 0")


@dataclass(frozen=True)
class PseudoGTSpec:
    """Where pseudo ground truth comes from and how views are derived."""

    backend: str = "synthetic"
    endpoint: str = ""
    amplitude_bound: float = 0.49
    scales: tuple = (2,)
    n_variants: int = 2
    first_k: int = 0
    boot_narrow: float = 0.4
    up_narrow: float = 0.5
    rotation_noise: float = 0.2
    seed: int = 22
    upscale_steps: int = 15
    boot_steps: int = 1
    upscale_guidance: float = 1.0
    boot_guidance_start: float = 0.06
    boot_guidance_end: float = 0.01
    n_samples: int = 1
    max_in_flight: int = 4

    def __post_init__(self):
        if self.backend not in ("synthetic", "remote"):
            raise InvalidInputError("backend must be 'synthetic' or 'remote'")
        if not self.scales or any(a not in (2, 4, 8) for a in self.scales):
            raise InvalidInputError("scales must be a non-empty subset of {2, 4, 8}")
        if self.n_variants < 0:
            raise InvalidInputError("n_variants must be >= 0")
        if self.first_k < 0:
            raise InvalidInputError("first_k must be >= 0 (0 means all cameras)")
        for name, v in (("boot_narrow", self.boot_narrow),
                        ("up_narrow", self.up_narrow)):
            if not 0 < v <= 1:
                raise InvalidInputError(f"{name} must lie in (0, 1]")
        if self.rotation_noise < 0:
            raise InvalidInputError("rotation_noise must be >= 0")
        if self.amplitude_bound < 0:
            raise InvalidInputError("amplitude_bound must be >= 0")
        if self.n_samples < 1 or self.max_in_flight < 1:
            raise InvalidInputError("n_samples and max_in_flight must be >= 1")


def build_backend(spec: PseudoGTSpec):
    """Construct the synthesis backend named by the spec."""
    if spec.backend == "synthetic":
        return SyntheticBackend(SyntheticBackendSpec(
            amplitude_bound=spec.amplitude_bound))
    if not spec.endpoint:
        raise InvalidInputError("remote backend needs a non-empty endpoint")
    return RemoteDiffusionClient(RemoteDiffusionConfig(
        endpoint=spec.endpoint,
        upscale_steps=spec.upscale_steps,
        bootstrap_steps=spec.boot_steps,
        seed=spec.seed,
        upscale_guidance=spec.upscale_guidance,
        bootstrap_guidance_start=spec.boot_guidance_start,
        bootstrap_guidance_end=spec.boot_guidance_end,
        max_in_flight=spec.max_in_flight,
    ))


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the dataset itself."""

    seed: int = 0
    n_init: int = 400
    init_bounds: float = 0.8
    init_scale_range: tuple = (0.05, 0.15)
    init_opacity: float = 0.1
    scale_floor_fraction: float = 0.2
    enable_bootstrap: bool = True
    enable_upscale: bool = True
    eval_interval: int = 250
    checkpoint_interval: int = 0
    schedule: Schedule = field(default_factory=lambda: Schedule(divisor=8))
    weights: StagedWeights = field(default_factory=StagedWeights)
    densify: DensifySpec = field(default_factory=DensifySpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    pseudo: PseudoGTSpec = field(default_factory=PseudoGTSpec)
    filter: FilterSpec = field(default_factory=FilterSpec)

    def __post_init__(self):
        if self.n_init < 1:
            raise InvalidInputError("n_init must be >= 1")
        if self.init_bounds <= 0:
            raise InvalidInputError("init_bounds must be > 0")
        lo, hi = self.init_scale_range
        if not 0 < lo <= hi:
            raise InvalidInputError("init_scale_range must satisfy 0 < lo <= hi")
        if not 0 < self.init_opacity < 1:
            raise InvalidInputError("init_opacity must lie in (0, 1)")
        if self.scale_floor_fraction < 0:
            raise InvalidInputError("scale_floor_fraction must be >= 0")
        if self.eval_interval < 1:
            raise InvalidInputError("eval_interval must be >= 1")
        if self.checkpoint_interval < 0:
            raise InvalidInputError("checkpoint_interval must be >= 0")


# ---------------------------------------------------------------------------
# Config file round-trip

_NESTED_FIELDS = {
    (TrainConfig, "schedule"): Schedule,
    (TrainConfig, "weights"): StagedWeights,
    (TrainConfig, "densify"): DensifySpec,
    (TrainConfig, "optimizer"): OptimizerSpec,
    (TrainConfig, "pseudo"): PseudoGTSpec,
    (TrainConfig, "filter"): FilterSpec,
}


def _tuples_to_lists(value):
    if isinstance(value, dict):
        return {k: _tuples_to_lists(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_tuples_to_lists(v) for v in value]
    return value


def config_to_dict(config: TrainConfig) -> dict:
    """Plain nested dict mirroring the config fields (tuples as lists)."""
    return _tuples_to_lists(dataclasses.asdict(config))


def _build_dataclass(cls, mapping, prefix: str, errors: list):
    if not isinstance(mapping, dict):
        errors.append(f"{prefix or cls.__name__}: expected a mapping")
        return None
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in mapping.items():
        if key not in known:
            errors.append(f"{prefix}{key}: unknown field")
            continue
        nested = _NESTED_FIELDS.get((cls, key))
        if nested is not None:
            built = _build_dataclass(nested, value, f"{prefix}{key}.", errors)
            if built is not None:
                kwargs[key] = built
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (InvalidInputError, TypeError, ValueError) as exc:
        errors.append(f"{prefix.rstrip('.') or 'config'}: {exc}")
        return None


def config_from_dict(data: dict) -> TrainConfig:
    """Build a TrainConfig, reporting every invalid field at once."""
    errors: list = []
    config = _build_dataclass(TrainConfig, data, "", errors)
    if errors:
        raise InvalidInputError("invalid config:\n" + "\n".join(errors))
    return config


def save_config(config: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(config_to_dict(config), fh, sort_keys=False)


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise InvalidInputError("config file must hold a mapping at top level")
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# Losses


def _to_float_pixels(image) -> np.ndarray:
    if isinstance(image, Image):
        pixels = image.pixels
    else:
        pixels = np.asarray(image)
    if pixels.dtype == np.uint8:
        return dequantize_array(pixels)
    return np.asarray(pixels, dtype=np.float64)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")


def loss_original(render_image, gt, lambda_dssim: float = 0.2):
    """(1-lambda)*L1 + lambda*(1-SSIM) and its gradient w.r.t. the render.

    The SSIM window shrinks to the largest odd size that fits when the
    images are smaller than the standard 11x11 window.
    """
    a = _to_float_pixels(render_image)
    b = _to_float_pixels(gt)
    _check_same_shape(a, b)
    diff = a - b
    l1 = float(np.mean(np.abs(diff)))
    g_l1 = np.sign(diff) / diff.size
    if lambda_dssim == 0:
        return l1, g_l1
    window = min(11, min(a.shape[0], a.shape[1]))
    if window % 2 == 0:
        window -= 1
    if window < 3:
        raise InvalidInputError("image too small for the structural term")
    s, g_s = ssim_with_grad(a, b, window=window)
    loss = (1 - lambda_dssim) * l1 + lambda_dssim * (1 - s)
    grad = (1 - lambda_dssim) * g_l1 - lambda_dssim * g_s
    return loss, grad


def _mean_l1_pairs(pairs, lam: float, label: str) -> float:
    pairs = list(pairs)
    if not pairs:
        raise InvalidInputError(f"no {label} pairs")
    total = 0.0
    for rendered, target in pairs:
        a = _to_float_pixels(rendered)
        b = _to_float_pixels(target)
        _check_same_shape(a, b)
        total += float(np.mean(np.abs(a - b)))
    return lam * total / len(pairs)


def loss_bootstrap(pairs, lambda_boot: float = 0.15) -> float:
    """(lambda_boot / N) * sum of mean absolute differences over N pairs."""
    return _mean_l1_pairs(pairs, lambda_boot, "bootstrap")


def loss_upscale(pairs, lambda_up: float = 0.1) -> float:
    """(lambda_up / M) * sum of mean absolute differences over M pairs."""
    return _mean_l1_pairs(pairs, lambda_up, "upscale")


def loss_hybrid(loss_o: float, loss_b: float, loss_u: float,
                weights: LossWeights) -> float:
    """(1 - lambda_boot - lambda_up) * L_o + L_b + L_u.

    L_b and L_u already carry their lambda factors.
    """
    coeff = 1.0 - weights.lambda_boot - weights.lambda_up
    if coeff <= 0:
        raise InvalidInputError("lambda_boot + lambda_up must stay below 1")
    return coeff * loss_o + loss_b + loss_u


# ---------------------------------------------------------------------------
# Training state and pseudo-GT caches


@dataclass(frozen=True)
class BootEntry:
    """One cached bootstrap pair: the view to render and its regeneration."""

    camera: Camera
    target: Image
    refresh_epoch: int


@dataclass(frozen=True)
class UpscaleEntry:
    """One cached upscale pair: the zoom view and its upscaled pseudo-GT."""

    render_camera: Camera
    target: Image
    scale: int
    refresh_epoch: int


@dataclass
class TrainState:
    """Mutable optimization state; caches hold pseudo-GT between refreshes."""

    scene: Scene
    seed: int
    iteration: int = 0
    adam_t: int = 0
    moments_m: dict = field(default_factory=dict)
    moments_v: dict = field(default_factory=dict)
    grad_accum: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grad_count: np.ndarray = field(default_factory=lambda: np.zeros(0))
    boot_cache: dict = field(default_factory=dict)
    up_cache: dict = field(default_factory=dict)
    log_rows: list = field(default_factory=list)


def _group_shape(scene: Scene, group: str) -> tuple:
    return getattr(scene, group).shape


def new_train_state(scene: Scene, seed: int) -> TrainState:
    """Fresh state with zeroed moments and densify accumulators."""
    n = len(scene)
    return TrainState(
        scene=scene,
        seed=seed,
        moments_m={g: np.zeros(_group_shape(scene, g)) for g in PARAM_GROUPS},
        moments_v={g: np.zeros(_group_shape(scene, g)) for g in PARAM_GROUPS},
        grad_accum=np.zeros(n),
        grad_count=np.zeros(n),
    )


def _variant_spec(seed: int, camera_id: int, rotation_noise: float) -> PerturbSpec:
    # Distinct sub-seed per camera so variants decorrelate across views.
    sub = int(stream(seed, "refresh-cameras", camera_id).integers(0, 2**62))
    return PerturbSpec(rotation_noise=rotation_noise, seed=sub)


def refresh_pseudo_gt(state: TrainState, cameras, scales, synthesizer, *,
                      spec: PseudoGTSpec = PseudoGTSpec(),
                      filter_spec: FilterSpec = FilterSpec(),
                      kinds=("bootstrap", "upscale"),
                      progress: float = 0.0,
                      epoch: int = 0) -> None:
    """Re-render the derived views and replace the pseudo-GT caches.

    Each training camera contributes itself plus n_variants rotation-only
    perturbations. Bootstrap entries render a narrowed crop and ask the
    synthesizer to regenerate it; upscale entries render a zoomed crop at
    reduced resolution and ask for an a-times upscale. The scene is never
    mutated. If the synthesizer is unavailable the stale caches are kept.
    """
    cameras = list(cameras)
    if spec.first_k > 0:
        cameras = cameras[:spec.first_k]
    guidance = spec.boot_guidance_start + (
        spec.boot_guidance_end - spec.boot_guidance_start) * min(max(progress, 0.0), 1.0)

    requests = []
    slots = []  # (kind, key, camera for the loss-side render)
    for ci, cam in enumerate(cameras):
        pspec = _variant_spec(state.seed, ci, spec.rotation_noise)
        if "bootstrap" in kinds:
            base = crop_camera(cam, CropSpec(spec.boot_narrow, 1))
            for v, vcam in enumerate(expand_training_camera(
                    base, spec.n_variants, pspec, rotation_only=True)):
                out = render(state.scene, vcam, filter_spec)
                source = Image(pixels=quantize_array(out.image))
                requests.append(SynthesizerRequest(
                    source=source, mode="regenerate",
                    seed=spec.seed + len(requests),
                    prompt=DEFAULT_BOOTSTRAP_PROMPT, guidance=guidance,
                    steps=spec.boot_steps, n_samples=spec.n_samples))
                slots.append(("bootstrap", (ci, v), vcam))
        if "upscale" in kinds:
            for a in scales:
                zoom = zoom_in_camera(cam, float(a))
                for v, vzoom in enumerate(expand_training_camera(
                        zoom, spec.n_variants, pspec, rotation_only=True)):
                    source_cam = crop_camera(vzoom, CropSpec(spec.up_narrow, a))
                    out = render(state.scene, source_cam, filter_spec)
                    source = Image(pixels=quantize_array(out.image))
                    render_cam = source_cam.with_resolution(
                        source_cam.width * a, source_cam.height * a)
                    requests.append(SynthesizerRequest(
                        source=source, mode="upscale", scale=int(a),
                        seed=spec.seed, prompt=DEFAULT_UPSCALE_PROMPT,
                        guidance=spec.upscale_guidance,
                        steps=spec.upscale_steps, n_samples=spec.n_samples))
                    slots.append(("upscale", (ci, int(a), v), render_cam))

    if not requests:
        return
    try:
        results = synthesize_many(requests, synthesizer,
                                  max_in_flight=spec.max_in_flight)
    except SynthesisUnavailableError as exc:
        logger.warning("pseudo-GT refresh skipped, keeping stale cache: %s", exc)
        return

    new_boot = dict(state.boot_cache) if "bootstrap" not in kinds else {}
    new_up = dict(state.up_cache) if "upscale" not in kinds else {}
    for (kind, key, cam), target in zip(slots, results):
        if kind == "bootstrap":
            new_boot[key] = BootEntry(camera=cam, target=target,
                                      refresh_epoch=epoch)
        else:
            new_up[key] = UpscaleEntry(render_camera=cam, target=target,
                                       scale=key[1], refresh_epoch=epoch)
    state.boot_cache = new_boot
    state.up_cache = new_up


# ---------------------------------------------------------------------------
# Densification


def _resize_rows(array: np.ndarray, keep: np.ndarray, n_new: int) -> np.ndarray:
    kept = array[keep]
    if n_new == 0:
        return kept
    pad_shape = (n_new,) + kept.shape[1:]
    return np.concatenate([kept, np.zeros(pad_shape)], axis=0)


def densify_and_prune(state: TrainState, spec: DensifySpec) -> Scene:
    """Clone / split high-gradient Gaussians, prune transparent ones.

    Gaussians whose averaged positional-gradient norm exceeds the threshold
    are cloned in place when small (max scale below split_scale) or replaced
    by two children with scales divided by 1.6, positions drawn from the
    parent's own distribution. Opacities below prune_opacity are removed.
    Growth past max_gaussians is skipped with a warning; pruning still runs.
    New rows start with zeroed optimizer moments and accumulators.
    """
    scene = state.scene
    n = len(scene)
    avg = state.grad_accum / np.maximum(state.grad_count, 1.0)
    high = avg > spec.grad_threshold
    max_scale = np.exp(scene.log_scales).max(axis=1)
    clone_mask = high & (max_scale < spec.split_scale)
    split_mask = high & ~clone_mask

    growth = int(clone_mask.sum()) + int(split_mask.sum())
    if growth and n + growth > spec.max_gaussians:
        logger.warning("densification skipped: %d + %d would exceed cap %d",
                       n, growth, spec.max_gaussians)
        clone_mask = np.zeros(n, dtype=bool)
        split_mask = np.zeros(n, dtype=bool)

    keep = ~split_mask  # split parents are replaced by their children
    parts = {g: [getattr(scene, g)[keep]] for g in PARAM_GROUPS}
    n_new = 0

    if clone_mask.any():
        for g in PARAM_GROUPS:
            parts[g].append(getattr(scene, g)[clone_mask])
        n_new += int(clone_mask.sum())

    split_idx = np.flatnonzero(split_mask)
    for i in split_idx:
        gauss = scene.gaussian(int(i))
        rot = gauss.rotation / np.linalg.norm(gauss.rotation)
        axes = quat_to_rotmat(rot) * gauss.scale  # columns scale the unit draws
        rng = stream(state.seed, "densify-split", state.iteration, int(i))
        offsets = rng.standard_normal((2, 3)) @ axes.T
        for k in range(2):
            parts["positions"].append((gauss.position + offsets[k])[None])
            parts["log_scales"].append((gauss.log_scale - math.log(SPLIT_FACTOR))[None])
            parts["rotations"].append(gauss.rotation[None])
            parts["opacity_logits"].append(np.asarray([gauss.opacity_logit]))
            parts["colors"].append(gauss.color[None])
        n_new += 2

    arrays = {g: np.concatenate(parts[g], axis=0) for g in PARAM_GROUPS}
    alive = sigmoid(arrays["opacity_logits"]) >= spec.prune_opacity
    arrays = {g: arr[alive] for g, arr in arrays.items()}

    state.scene = replace(scene, **arrays)
    for g in PARAM_GROUPS:
        state.moments_m[g] = _resize_rows(state.moments_m[g], keep, n_new)[alive]
        state.moments_v[g] = _resize_rows(state.moments_v[g], keep, n_new)[alive]
    n_now = len(state.scene)
    state.grad_accum = np.zeros(n_now)
    state.grad_count = np.zeros(n_now)
    return state.scene


# ---------------------------------------------------------------------------
# Optimizer


_GROUP_RATE = {
    "positions": "lr_position",
    "log_scales": "lr_scale",
    "rotations": "lr_rotation",
    "opacity_logits": "lr_opacity",
    "colors": "lr_color",
}


def position_lr(spec: OptimizerSpec, iteration: int, total_iters: int) -> float:
    """Log-linear decay from lr_position to lr_position_final."""
    t = min(max(iteration / max(total_iters - 1, 1), 0.0), 1.0)
    return float(np.exp((1 - t) * np.log(spec.lr_position)
                        + t * np.log(spec.lr_position_final)))


def adam_step(state: TrainState, grads: ParamGradients, spec: OptimizerSpec,
              total_iters: int) -> None:
    """One Adam update over all parameter groups, then projections.

    Quaternions are renormalized and colors clipped to [0, 1] after the
    step so the scene stays renderable.
    """
    state.adam_t += 1
    t = state.adam_t
    updated = {}
    for g in PARAM_GROUPS:
        grad = getattr(grads, g)
        m = state.moments_m[g] = spec.beta1 * state.moments_m[g] + (1 - spec.beta1) * grad
        v = state.moments_v[g] = spec.beta2 * state.moments_v[g] + (1 - spec.beta2) * grad**2
        m_hat = m / (1 - spec.beta1**t)
        v_hat = v / (1 - spec.beta2**t)
        if g == "positions":
            lr = position_lr(spec, state.iteration, total_iters)
        else:
            lr = getattr(spec, _GROUP_RATE[g])
        updated[g] = getattr(state.scene, g) - lr * m_hat / (np.sqrt(v_hat) + spec.eps)

    norms = np.linalg.norm(updated["rotations"], axis=1, keepdims=True)
    degenerate = norms[:, 0] < 1e-12
    if degenerate.any():
        updated["rotations"][degenerate] = (1.0, 0.0, 0.0, 0.0)
        norms[degenerate] = 1.0
    updated["rotations"] = updated["rotations"] / norms
    updated["colors"] = np.clip(updated["colors"], 0.0, 1.0)
    state.scene = replace(state.scene, **updated)


# ---------------------------------------------------------------------------
# Checkpoints


def _pack_camera(cam: Camera) -> np.ndarray:
    return np.concatenate([cam.position, cam.orientation.ravel(),
                           [cam.fov_x, cam.fov_y, cam.width, cam.height,
                            cam.near, cam.far]])


def _unpack_camera(row: np.ndarray) -> Camera:
    return Camera(position=row[:3], orientation=row[3:12].reshape(3, 3),
                  fov_x=row[12], fov_y=row[13], width=int(row[14]),
                  height=int(row[15]), near=row[16], far=row[17])


def save_checkpoint(state: TrainState, path_prefix) -> None:
    """Write the scene PLY plus a sidecar npz with the full training state.

    The PLY is the interoperable artifact (float32). The sidecar keeps the
    scene at full precision along with optimizer moments, densify
    accumulators, and both pseudo-GT caches, so a resumed run continues
    bit-for-bit where the original left off.
    """
    from .io import write_ply
    prefix = str(path_prefix)
    write_ply(state.scene, prefix + ".ply")
    payload = {"iteration": np.asarray(state.iteration),
               "adam_t": np.asarray(state.adam_t),
               "grad_accum": state.grad_accum,
               "grad_count": state.grad_count,
               "scene_background": state.scene.background}
    for g in PARAM_GROUPS:
        payload[f"scene_{g}"] = getattr(state.scene, g)
        payload[f"m_{g}"] = state.moments_m[g]
        payload[f"v_{g}"] = state.moments_v[g]
    for kind, cache, key_width in (("boot", state.boot_cache, 2),
                                   ("up", state.up_cache, 3)):
        keys = sorted(cache)
        payload[f"{kind}_keys"] = np.asarray(
            keys, dtype=np.int64).reshape(len(keys), key_width)
        payload[f"{kind}_epochs"] = np.asarray(
            [cache[k].refresh_epoch for k in keys], dtype=np.int64)
        cam_of = (lambda e: e.camera) if kind == "boot" else (
            lambda e: e.render_camera)
        payload[f"{kind}_cams"] = np.asarray(
            [_pack_camera(cam_of(cache[k])) for k in keys]).reshape(len(keys), 18)
        for j, k in enumerate(keys):
            payload[f"{kind}_target_{j}"] = cache[k].target.pixels
    np.savez(prefix + ".opt.npz", **payload)


def load_checkpoint(path_prefix, seed: int, background=(0.0, 0.0, 0.0)) -> TrainState:
    """Rebuild a TrainState from a checkpoint pair.

    Prefers the full-precision scene in the sidecar npz; a sidecar without
    scene arrays (foreign or hand-edited) falls back to the PLY, and absent
    cache blocks leave the caches empty.
    """
    from .io import read_ply
    prefix = str(path_prefix)
    data = np.load(prefix + ".opt.npz")
    if "scene_positions" in data.files:
        scene = Scene(background=data["scene_background"],
                      **{g: data[f"scene_{g}"] for g in PARAM_GROUPS})
    else:
        scene = read_ply(prefix + ".ply", background=background)
    state = new_train_state(scene, seed)
    state.iteration = int(data["iteration"])
    state.adam_t = int(data["adam_t"])
    state.grad_accum = data["grad_accum"]
    state.grad_count = data["grad_count"]
    for g in PARAM_GROUPS:
        state.moments_m[g] = data[f"m_{g}"]
        state.moments_v[g] = data[f"v_{g}"]
    for kind in ("boot", "up"):
        if f"{kind}_keys" not in data.files:
            continue
        cache = {}
        cams = data[f"{kind}_cams"]
        epochs = data[f"{kind}_epochs"]
        for j, key in enumerate(data[f"{kind}_keys"]):
            cam = _unpack_camera(cams[j])
            target = Image(pixels=data[f"{kind}_target_{j}"])
            if kind == "boot":
                cache[tuple(int(v) for v in key)] = BootEntry(
                    camera=cam, target=target, refresh_epoch=int(epochs[j]))
            else:
                cache[tuple(int(v) for v in key)] = UpscaleEntry(
                    render_camera=cam, target=target, scale=int(key[1]),
                    refresh_epoch=int(epochs[j]))
        if kind == "boot":
            state.boot_cache = cache
        else:
            state.up_cache = cache
    return state


# ---------------------------------------------------------------------------
# Training loop


@dataclass(frozen=True)
class TrainResult:
    """Final scene plus the metric log accumulated during the run."""

    scene: Scene
    log: tuple
    state: TrainState


LOG_COLUMNS = ("iter", "loss_o", "loss_b", "loss_u", "psnr", "ssim", "n_gaussians")


def _append_log_csv(path, rows, start_index: int) -> int:
    """Append rows[start_index:] to the CSV, writing the header once."""
    new_rows = rows[start_index:]
    if not new_rows:
        return start_index
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        if fh.tell() == 0:
            writer.writeheader()
        for row in new_rows:
            writer.writerow(row)
    return len(rows)


def _accumulate(total: ParamGradients, extra: ParamGradients) -> None:
    for g in PARAM_GROUPS:
        arr = getattr(total, g)
        arr += getattr(extra, g)


def _interval_boundary(iteration: int, start: int, end: int, interval: int) -> bool:
    return start <= iteration < end and (iteration - start) % interval == 0


def _last_boundary(iteration: int, start: int, end: int, interval: int):
    """Most recent refresh boundary strictly before `iteration`, if any."""
    if iteration <= start or iteration >= end:
        return None
    return start + ((iteration - 1 - start) // interval) * interval


def _init_scene(config: TrainConfig, cameras) -> Scene:
    scene = random_scene(
        config.n_init, seed=config.seed, bounds=config.init_bounds,
        scale_range=tuple(config.init_scale_range),
        opacity_range=(config.init_opacity, config.init_opacity))
    if config.scale_floor_fraction > 0:
        scene = clamp_min_scales(scene, cameras, config.scale_floor_fraction)
    return scene


def _diverged(state: TrainState, losses: dict, out_dir) -> TrainingDivergedError:
    diag = {"iteration": state.iteration, "n_gaussians": len(state.scene)}
    diag.update({k: float(v) for k, v in losses.items()})
    if out_dir is not None:
        path = os.path.join(str(out_dir), "diverged.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(diag, fh, indent=2)
    return TrainingDivergedError(f"non-finite loss at iteration {state.iteration}: {diag}")


def train(config: TrainConfig, dataset, *, init_scene: Scene = None,
          out_dir=None, synthesizer=None, resume_from=None) -> TrainResult:
    """Optimize a scene against (camera, ground-truth image) pairs.

    Cameras are visited round-robin in a per-epoch shuffled order. Each
    step renders the current view and applies the hybrid loss; bootstrap
    and upscale terms only contribute inside their active sub-windows and
    only when their caches hold entries for the current camera. Caches are
    refreshed at interval starts, densification runs on its own schedule,
    and PSNR/SSIM over the training views are logged every eval_interval.

    The run is deterministic given the config seed, and a run resumed from
    a checkpoint written by this loop reproduces the uninterrupted run
    bit for bit (the checkpoint carries the full-precision scene and the
    pseudo-GT caches).
    """
    pairs = list(dataset)
    if not pairs:
        raise InvalidInputError("dataset must hold at least one (camera, image) pair")
    cameras = [cam for cam, _ in pairs]
    gt_float = [_to_float_pixels(img) for _, img in pairs]
    for cam, gt in zip(cameras, gt_float):
        if gt.shape != (cam.height, cam.width, 3):
            raise InvalidInputError(
                f"ground truth shape {gt.shape} does not match its camera "
                f"({cam.height}, {cam.width}, 3)")

    eff = config.schedule.effective()
    backend = synthesizer
    if backend is None and (config.enable_bootstrap or config.enable_upscale):
        backend = build_backend(config.pseudo)

    if resume_from is not None:
        state = load_checkpoint(resume_from, config.seed)
    else:
        scene = init_scene if init_scene is not None else _init_scene(config, cameras)
        state = new_train_state(scene, config.seed)
    if len(state.scene) > config.densify.max_gaussians:
        raise InvalidInputError("initial scene already exceeds max_gaussians")

    def run_refresh(kind: str, boundary: int) -> None:
        if kind == "bootstrap":
            start, end, interval = eff.boot_start, eff.boot_end, eff.boot_interval
        else:
            start, end, interval = eff.up_start, eff.up_end, eff.up_interval
        progress = (boundary - start) / max(end - start, 1)
        refresh_pseudo_gt(state, cameras, config.pseudo.scales, backend,
                          spec=config.pseudo, filter_spec=config.filter,
                          kinds=(kind,), progress=progress,
                          epoch=(boundary - start) // interval)

    if resume_from is not None:
        # Checkpoints written by save_checkpoint carry the caches; a sidecar
        # without them gets a best-effort rebuild from the current scene.
        if config.enable_bootstrap and not state.boot_cache:
            b = _last_boundary(state.iteration, eff.boot_start, eff.boot_end,
                               eff.boot_interval)
            if b is not None:
                run_refresh("bootstrap", b)
        if config.enable_upscale and not state.up_cache:
            b = _last_boundary(state.iteration, eff.up_start, eff.up_end,
                               eff.up_interval)
            if b is not None:
                run_refresh("upscale", b)

    n_cams = len(cameras)
    order = None
    flushed = 0
    log_path = None if out_dir is None else os.path.join(str(out_dir), "log.csv")
    if out_dir is not None:
        os.makedirs(str(out_dir), exist_ok=True)

    for it in range(state.iteration, eff.total_iters):
        state.iteration = it
        if it % n_cams == 0 or order is None:
            order = stream(config.seed, "camera-order", it // n_cams).permutation(n_cams)
        ci = int(order[it % n_cams])

        if config.enable_bootstrap and _interval_boundary(
                it, eff.boot_start, eff.boot_end, eff.boot_interval):
            run_refresh("bootstrap", it)
        if config.enable_upscale and _interval_boundary(
                it, eff.up_start, eff.up_end, eff.up_interval):
            run_refresh("upscale", it)

        phase = phase_of(it, eff)
        stage = config.weights.at(it, eff)

        boot_entries = []
        if phase.bootstrap and config.enable_bootstrap and stage.lambda_boot > 0:
            boot_entries = [state.boot_cache[(ci, v)]
                            for v in range(config.pseudo.n_variants + 1)
                            if (ci, v) in state.boot_cache]
        up_entries = []
        if phase.upscale and config.enable_upscale and stage.lambda_up > 0:
            up_entries = [state.up_cache[(ci, int(a), v)]
                          for a in config.pseudo.scales
                          for v in range(config.pseudo.n_variants + 1)
                          if (ci, int(a), v) in state.up_cache]

        lam_boot = stage.lambda_boot if boot_entries else 0.0
        lam_up = stage.lambda_up if up_entries else 0.0
        weights = LossWeights(lam_boot, lam_up, stage.lambda_dssim)
        coeff = 1.0 - lam_boot - lam_up

        out = render(state.scene, cameras[ci], config.filter)
        l_o, g_render = loss_original(out.image, gt_float[ci], stage.lambda_dssim)
        if not math.isfinite(l_o) or not np.all(np.isfinite(g_render)):
            raise _diverged(state, {"loss_o": l_o}, out_dir)
        grads = render_backward(state.scene, cameras[ci], config.filter,
                                coeff * g_render)

        l_b = 0.0
        if boot_entries:
            boot_pairs = []
            for entry in boot_entries:
                r = render(state.scene, entry.camera, config.filter).image
                target = dequantize_array(entry.target.pixels)
                boot_pairs.append((r, target))
                g = (lam_boot / len(boot_entries)) * np.sign(r - target) / r.size
                if not np.all(np.isfinite(g)):
                    raise _diverged(state, {"loss_o": l_o}, out_dir)
                _accumulate(grads, render_backward(
                    state.scene, entry.camera, config.filter, g))
            l_b = loss_bootstrap(boot_pairs, lam_boot)

        l_u = 0.0
        if up_entries:
            up_pairs = []
            for entry in up_entries:
                r = render(state.scene, entry.render_camera, config.filter).image
                target = dequantize_array(entry.target.pixels)
                up_pairs.append((r, target))
                g = (lam_up / len(up_entries)) * np.sign(r - target) / r.size
                if not np.all(np.isfinite(g)):
                    raise _diverged(state, {"loss_o": l_o}, out_dir)
                _accumulate(grads, render_backward(
                    state.scene, entry.render_camera, config.filter, g))
            l_u = loss_upscale(up_pairs, lam_up)

        l_h = loss_hybrid(l_o, l_b, l_u, weights)
        if not math.isfinite(l_h) or not all(
                np.isfinite(getattr(grads, g)).all() for g in PARAM_GROUPS):
            raise _diverged(state, {"loss_o": l_o, "loss_b": l_b,
                                    "loss_u": l_u, "loss_h": l_h}, out_dir)

        pos_norm = np.linalg.norm(grads.positions, axis=1)
        state.grad_accum += pos_norm
        state.grad_count += pos_norm > 0

        adam_step(state, grads, config.optimizer, eff.total_iters)

        if eff.densify_start < it < eff.densify_end and \
                (it - eff.densify_start) % eff.densify_interval == 0:
            densify_and_prune(state, config.densify)
            violations = validate_scene(state.scene)
            if violations:
                raise _diverged(state, {"loss_o": l_o, "loss_b": l_b,
                                        "loss_u": l_u, "loss_h": l_h}, out_dir)
            if config.scale_floor_fraction > 0:
                state.scene = clamp_min_scales(state.scene, cameras,
                                               config.scale_floor_fraction)

        if it % config.eval_interval == 0 or it == eff.total_iters - 1:
            renders = [render(state.scene, cam, config.filter).image
                       for cam in cameras]
            row = {"iter": it, "loss_o": l_o, "loss_b": l_b, "loss_u": l_u,
                   "psnr": float(np.mean([psnr(r, g) for r, g in zip(renders, gt_float)])),
                   "ssim": float(np.mean([ssim(r, g) for r, g in zip(renders, gt_float)])),
                   "n_gaussians": len(state.scene)}
            state.log_rows.append(row)
            if log_path is not None:
                flushed = _append_log_csv(log_path, state.log_rows, flushed)

        if config.checkpoint_interval and out_dir is not None and \
                (it + 1) % config.checkpoint_interval == 0:
            state.iteration = it + 1
            save_checkpoint(state, os.path.join(str(out_dir), f"ckpt_{it + 1:06d}"))

    state.iteration = eff.total_iters
    return TrainResult(scene=state.scene, log=tuple(state.log_rows), state=state)
