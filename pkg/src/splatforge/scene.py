"""Core value types: Gaussians, scenes, cameras, images.

All types are immutable; arrays are copied on construction and marked
read-only, so instances are safe to share across threads. Optimizable
quantities are stored in unconstrained form (log-scale, logit-opacity)
so an optimizer step can never produce an invalid primitive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

QUAT_NORM_TOL = 1e-6
ORTHO_TOL = 1e-6


class InvalidInputError(ValueError):
    """Raised when an operation receives inputs outside its contract."""


def _frozen(a: np.ndarray, shape: tuple[int, ...], dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    if out.shape != shape:
        raise InvalidInputError(f"expected shape {shape}, got {out.shape}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Gaussian:
    """One anisotropic 3D primitive.

    position: world-space mean (3,)
    log_scale: per-axis log extents; exp() gives positive world-unit scales
    rotation: quaternion (w, x, y, z), unit norm
    opacity_logit: pre-sigmoid opacity
    color: RGB in [0, 1], degree-0 appearance (no view dependence)
    """

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray
    opacity_logit: float
    color: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position, (3,)))
        object.__setattr__(self, "log_scale", _frozen(self.log_scale, (3,)))
        object.__setattr__(self, "rotation", _frozen(self.rotation, (4,)))
        object.__setattr__(self, "opacity_logit", float(self.opacity_logit))
        object.__setattr__(self, "color", _frozen(self.color, (3,)))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(_sigmoid(np.array(self.opacity_logit)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # numerically stable on both tails
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    """Logistic function, stable for large |x|."""
    return _sigmoid(np.asarray(x, dtype=np.float64))


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices from (..., 4) quaternions in (w, x, y, z) order.

    Quaternions are normalized internally, so inputs only need nonzero norm.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(q)):
        raise InvalidInputError("quaternion with zero or non-finite norm")
    w, x, y, z = (q / norm).T
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def build_covariance(scale, rotation) -> np.ndarray:
    """3x3 world covariance R diag(scale^2) R^T from scale and unit quaternion.

    scale is the linear extent (not log); must be positive componentwise.
    Result is symmetric PSD with eigenvalues scale^2.
    """
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(rotation))):
        raise InvalidInputError("non-finite covariance inputs")
    if scale.shape[-1] != 3 or np.any(scale <= 0):
        raise InvalidInputError("scale must be 3 positive components")
    R = quat_to_rotmat(rotation)
    RS = R * scale[..., None, :]  # R @ diag(s)
    cov = RS @ np.swapaxes(RS, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))  # exact symmetry


@dataclass(frozen=True)
class Camera:
    """Pinhole camera.

    orientation is the world-to-camera rotation: rows are the camera's
    x/y/z axes expressed in world coordinates, and a world point maps to
    camera space as orientation @ (p - position). The camera looks along
    +z in its own frame. fov_x/fov_y are full angles in radians.
    """

    position: np.ndarray
    orientation: np.ndarray
    fov_x: float
    fov_y: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen(self.position, (3,)))
        object.__setattr__(self, "orientation", _frozen(self.orientation, (3, 3)))
        object.__setattr__(self, "fov_x", float(self.fov_x))
        object.__setattr__(self, "fov_y", float(self.fov_y))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "near", float(self.near))
        object.__setattr__(self, "far", float(self.far))
        R = self.orientation
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise InvalidInputError("camera orientation is not orthonormal")
        if not (0 < self.fov_x < math.pi and 0 < self.fov_y < math.pi):
            raise InvalidInputError("fov must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("resolution must be at least 1x1")
        if not 0 < self.near < self.far:
            raise InvalidInputError("need 0 < near < far")

    @property
    def fx(self) -> float:
        """Focal length in pixels along x."""
        return self.width / (2.0 * math.tan(self.fov_x / 2.0))

    @property
    def fy(self) -> float:
        return self.height / (2.0 * math.tan(self.fov_y / 2.0))

    def with_resolution(self, width: int, height: int) -> "Camera":
        return replace(self, width=width, height=height)


@dataclass(frozen=True)
class Scene:
    """An ordered collection of Gaussians plus a background color.

    Stored as structure-of-arrays for vectorized rendering; list order has
    no render semantics (the rasterizer sorts by depth). Construct from
    arrays directly or via from_gaussians.
    """

    positions: np.ndarray        # (N, 3)
    log_scales: np.ndarray       # (N, 3)
    rotations: np.ndarray        # (N, 4) quaternions (w, x, y, z)
    opacity_logits: np.ndarray   # (N,)
    colors: np.ndarray           # (N, 3)
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        n = np.asarray(self.positions).shape[0]
        object.__setattr__(self, "positions", _frozen(self.positions, (n, 3)))
        object.__setattr__(self, "log_scales", _frozen(self.log_scales, (n, 3)))
        object.__setattr__(self, "rotations", _frozen(self.rotations, (n, 4)))
        object.__setattr__(self, "opacity_logits", _frozen(self.opacity_logits, (n,)))
        object.__setattr__(self, "colors", _frozen(self.colors, (n, 3)))
        object.__setattr__(self, "background", _frozen(self.background, (3,)))

    def __len__(self) -> int:
        return self.positions.shape[0]

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i],
            log_scale=self.log_scales[i],
            rotation=self.rotations[i],
            opacity_logit=float(self.opacity_logits[i]),
            color=self.colors[i],
        )

    @property
    def gaussians(self) -> list[Gaussian]:
        return [self.gaussian(i) for i in range(len(self))]

    @classmethod
    def from_gaussians(cls, gaussians, background=(0.0, 0.0, 0.0)) -> "Scene":
        gaussians = list(gaussians)
        if gaussians:
            return cls(
                positions=np.array([g.position for g in gaussians]),
                log_scales=np.array([g.log_scale for g in gaussians]),
                rotations=np.array([g.rotation for g in gaussians]),
                opacity_logits=np.array([g.opacity_logit for g in gaussians]),
                colors=np.array([g.color for g in gaussians]),
                background=np.asarray(background, dtype=np.float64),
            )
        return cls.empty(background)

    @classmethod
    def empty(cls, background=(0.0, 0.0, 0.0)) -> "Scene":
        z = np.zeros((0, 3))
        return cls(z, z, np.zeros((0, 4)), np.zeros(0), z,
                   np.asarray(background, dtype=np.float64))


@dataclass(frozen=True)
class Violation:
    """One invariant violation found by validate_scene."""

    index: int          # Gaussian index, -1 for scene-level problems
    fieldname: str
    message: str


def validate_scene(scene: Scene) -> list[Violation]:
    """Report every Gaussian-invariant violation; never raises.

    Checks: finite parameters, quaternion norm within 1e-6 of 1, and a
    nonempty scene (required for rendering). Two calls on the same scene
    return identical reports.
    """
    reports: list[Violation] = []
    if len(scene) == 0:
        reports.append(Violation(-1, "scene", "empty scene"))
        return reports
    finite_fields = [
        ("position", scene.positions),
        ("scale", scene.log_scales),
        ("opacity", scene.opacity_logits.reshape(-1, 1)),
        ("color", scene.colors),
    ]
    for name, arr in finite_fields:
        bad = ~np.all(np.isfinite(arr), axis=1)
        for i in np.nonzero(bad)[0]:
            reports.append(Violation(int(i), name, "non-finite value"))
    norms = np.linalg.norm(scene.rotations, axis=1)
    bad_rot = ~np.isfinite(norms) | (np.abs(norms - 1.0) > QUAT_NORM_TOL)
    for i in np.nonzero(bad_rot)[0]:
        reports.append(Violation(int(i), "rotation",
                                 f"quaternion norm {norms[i]:.6g} not within 1e-6 of 1"))
    reports.sort(key=lambda v: (v.index, v.fieldname))
    return reports


@dataclass(frozen=True)
class Image:
    """H x W x 3 image buffer.

    Float-linear images are float64 with values in [0, 1]; quantized
    images are uint8. The representation tag is the dtype.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidInputError(f"image must be (H, W, 3), got {px.shape}")
        if px.dtype == np.uint8:
            px = px.copy()
        else:
            px = px.astype(np.float64)
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def quantized(self) -> bool:
        return self.pixels.dtype == np.uint8


def quantize_array(values: np.ndarray) -> np.ndarray:
    """Float [0,1] -> integer channel values, round-half-up, clamped to [0,255]."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidInputError("non-finite pixel value")
    return np.clip(np.floor(values * 255.0 + 0.5), 0, 255).astype(np.uint8)


def dequantize_array(values: np.ndarray) -> np.ndarray:
    """Integer channel values -> float [0,1] (v / 255)."""
    return np.asarray(values, dtype=np.float64) / 255.0


def quantize(image):
    """Quantize a float image (Image or bare array) to 8-bit."""
    if isinstance(image, Image):
        if image.quantized:
            raise InvalidInputError("image is already quantized")
        return Image(quantize_array(image.pixels))
    return quantize_array(image)


def dequantize(image):
    """Dequantize an 8-bit image (Image or bare array) to float [0,1]."""
    if isinstance(image, Image):
        if not image.quantized:
            raise InvalidInputError("image is not quantized")
        return Image(dequantize_array(image.pixels))
    return dequantize_array(image)
