"""Camera construction: zoom-in, cropped, and randomly perturbed variants.

All functions are pure and deterministic given their seeds; perturbation
randomness comes from per-(seed, camera-index) Philox substreams so results
never depend on call order or thread count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .scene import Camera, InvalidInputError, ORTHO_TOL


@dataclass(frozen=True)
class CropSpec:
    """Narrow the field of view by s_nar and shrink the output resolution.

    The cropped camera keeps the view direction; its image covers the
    central s_nar fraction (per axis, in tangent space) of the original,
    rendered at s_nar/render_downscale of the original resolution.
    """

    narrow_factor: float = 0.4
    render_downscale: int = 1

    def __post_init__(self):
        if not 0 < self.narrow_factor <= 1:
            raise InvalidInputError("narrow_factor must lie in (0, 1]")
        if self.render_downscale < 1:
            raise InvalidInputError("render_downscale must be >= 1")


@dataclass(frozen=True)
class PerturbSpec:
    """Gaussian noise scales for camera jitter plus the RNG seed."""

    rotation_noise: float = 0.2
    translation_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.rotation_noise < 0 or self.translation_noise < 0:
            raise InvalidInputError("noise scales must be >= 0")


def _narrow_fov(fov: float, factor: float) -> float:
    return 2.0 * math.atan(math.tan(fov / 2.0) * factor)


def zoom_in_camera(cam: Camera, a: float) -> Camera:
    """Narrow both FoV axes so tan(fov'/2) = tan(fov/2)/a; pose and
    resolution are unchanged. a = 1 returns the camera as-is."""
    if a < 1:
        raise InvalidInputError("zoom factor must be >= 1")
    if a == 1:
        return cam
    return replace(cam, fov_x=_narrow_fov(cam.fov_x, 1.0 / a),
                   fov_y=_narrow_fov(cam.fov_y, 1.0 / a))


def translate_zoom_camera(cam: Camera, a: float, focus_depth: float) -> Camera:
    """Alternative zoom: move the camera along its view axis toward a focus
    plane at `focus_depth` so the pixel footprint there shrinks by a.

    Not used by the training pipeline (FoV narrowing is the default); the
    two differ under perspective for content off the focus plane.
    """
    if a < 1:
        raise InvalidInputError("zoom factor must be >= 1")
    if focus_depth <= 0:
        raise InvalidInputError("focus_depth must be > 0")
    view_dir = cam.orientation[2]  # camera +z axis in world coordinates
    shift = focus_depth * (1.0 - 1.0 / a)
    return replace(cam, position=cam.position + shift * view_dir)


def crop_camera(cam: Camera, crop: CropSpec) -> Camera:
    """Apply a CropSpec: tan(fov'/2) = s_nar * tan(fov/2) and resolution
    s_nar * size / render_downscale, rounded to the nearest integer."""
    if cam.width % crop.render_downscale or cam.height % crop.render_downscale:
        raise InvalidInputError("resolution not divisible by render_downscale")
    s = crop.narrow_factor
    width = round(s * cam.width / crop.render_downscale)
    height = round(s * cam.height / crop.render_downscale)
    if width < 1 or height < 1:
        raise InvalidInputError("cropped resolution is below one pixel")
    if s == 1 and crop.render_downscale == 1:
        return cam
    return replace(cam, fov_x=_narrow_fov(cam.fov_x, s),
                   fov_y=_narrow_fov(cam.fov_y, s),
                   width=width, height=height)


def orthonormalize(mat: np.ndarray) -> np.ndarray:
    """Gram-Schmidt on rows, repeated until max|R R^T - I| < 1e-6."""
    R = np.array(mat, dtype=np.float64)
    for _ in range(3):  # one pass suffices; repeats guard accumulation error
        for i in range(3):
            for j in range(i):
                R[i] -= (R[i] @ R[j]) * R[j]
            norm = np.linalg.norm(R[i])
            if norm < 1e-12:
                raise InvalidInputError("degenerate rotation matrix")
            R[i] /= norm
        if np.max(np.abs(R @ R.T - np.eye(3))) < ORTHO_TOL:
            return R
    raise InvalidInputError("orthonormalization failed to converge")


def perturb_camera(cam: Camera, spec: PerturbSpec, camera_index: int = 0) -> Camera:
    """Jitter orientation and position with seeded Gaussian noise.

    orientation' = orthonormalize(R + rotation_noise * N), position' =
    position + translation_noise * n; N and n are standard normal from the
    (seed, camera_index) substream. Deterministic given (spec.seed, index).
    Degenerate noise draws are retried up to 8 times.
    """
    if spec.rotation_noise == 0 and spec.translation_noise == 0:
        return cam
    gen = rng.stream(spec.seed, "perturb-camera", camera_index)
    last_err = None
    for _ in range(8):
        noise = gen.standard_normal((3, 3))
        shift = gen.standard_normal(3)
        try:
            R = orthonormalize(cam.orientation + spec.rotation_noise * noise)
        except InvalidInputError as e:
            last_err = e
            continue
        return replace(cam, orientation=R,
                       position=cam.position + spec.translation_noise * shift)
    raise InvalidInputError(f"perturbation failed after 8 attempts: {last_err}")


def expand_training_camera(cam: Camera, n_variants: int = 2,
                           spec: PerturbSpec = PerturbSpec(),
                           rotation_only: bool = False) -> list[Camera]:
    """Return [cam] plus n_variants perturbed copies.

    rotation_only=True zeroes the translation noise (the upscaling variants
    share the camera position exactly); variant i uses substream index i.
    """
    if n_variants < 0:
        raise InvalidInputError("n_variants must be >= 0")
    if rotation_only:
        spec = replace(spec, translation_noise=0.0)
    return [cam] + [perturb_camera(cam, spec, camera_index=i)
                    for i in range(n_variants)]
