"""Random ground-truth scene and camera generation for desk-scale runs.

These generators back the synth-scene CLI command and the test oracles.
Everything is deterministic given the seed.
"""

from __future__ import annotations

import math

import numpy as np

from . import rng
from .scene import Camera, InvalidInputError, Scene, inverse_sigmoid


def random_scene(n_gaussians: int, seed: int, bounds: float = 1.0,
                 scale_range: tuple[float, float] = (0.02, 0.25),
                 opacity_range: tuple[float, float] = (0.2, 0.95),
                 background=(0.0, 0.0, 0.0),
                 min_depth_gap: float = 0.0,
                 smooth: bool = False) -> Scene:
    """Sample a valid random scene inside [-bounds, bounds]^3.

    min_depth_gap > 0 spaces the Gaussians apart along the world z axis,
    which keeps depth-sort order stable under the small parameter nudges
    finite-difference tests apply. smooth=True biases toward large soft
    Gaussians (used by the interpolation-consistency checks).
    """
    if n_gaussians < 1:
        raise InvalidInputError("need at least one Gaussian")
    gen = rng.stream(seed, "random-scene")
    if min_depth_gap > 0:
        # evenly spaced z with jitter below half the gap keeps gaps positive
        base = np.linspace(-bounds, bounds, n_gaussians)
        if n_gaussians > 1 and base[1] - base[0] <= min_depth_gap:
            raise InvalidInputError("min_depth_gap too large for bounds/count")
        z = base + gen.uniform(-0.25, 0.25, n_gaussians) * min_depth_gap
        xy = gen.uniform(-bounds, bounds, (n_gaussians, 2))
        positions = np.column_stack([xy, z])
    else:
        positions = gen.uniform(-bounds, bounds, (n_gaussians, 3))
    lo, hi = scale_range
    if smooth:
        lo = max(lo, 0.3 * bounds)
        hi = max(hi, 0.6 * bounds)
    log_scales = np.log(gen.uniform(lo, hi, (n_gaussians, 3)))
    quats = gen.standard_normal((n_gaussians, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    op_lo, op_hi = opacity_range
    opacity_logits = inverse_sigmoid(gen.uniform(op_lo, op_hi, n_gaussians))
    colors = gen.uniform(0.05, 0.95, (n_gaussians, 3))
    return Scene(positions, log_scales, quats, opacity_logits, colors,
                 np.asarray(background, dtype=np.float64))


def look_at(position: np.ndarray, target: np.ndarray,
            up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera rotation for a camera at `position` looking at `target`."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise InvalidInputError("camera position coincides with target")
    forward /= norm
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(up, forward)
    if np.linalg.norm(right) < 1e-9:  # looking straight along up
        right = np.cross(np.array([1.0, 0.0, 0.0]), forward)
    right /= np.linalg.norm(right)
    true_up = np.cross(forward, right)
    return np.stack([right, true_up, forward])  # rows: camera x, y, z axes


def orbit_cameras(n_cameras: int, seed: int, radius: float = 3.0,
                  width: int = 64, height: int = 64,
                  fov: float = math.radians(50.0),
                  target=(0.0, 0.0, 0.0),
                  near: float = 0.05, far: float = 100.0) -> list[Camera]:
    """Cameras on a sphere of `radius` around `target`, looking inward.

    Directions are uniform on the sphere with poles avoided (|z of the view
    axis| capped at 0.95) so the up vector stays well-conditioned.
    """
    if n_cameras < 1:
        raise InvalidInputError("need at least one camera")
    gen = rng.stream(seed, "orbit-cameras")
    target = np.asarray(target, dtype=np.float64)
    cams = []
    while len(cams) < n_cameras:
        d = gen.standard_normal(3)
        norm = np.linalg.norm(d)
        if norm < 1e-9:
            continue
        d /= norm
        if abs(d[1]) > 0.95:
            continue
        position = target + radius * d
        cams.append(Camera(position=position,
                           orientation=look_at(position, target),
                           fov_x=fov, fov_y=fov,
                           width=width, height=height, near=near, far=far))
    return cams
