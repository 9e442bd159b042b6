"""Shared test fixtures and scene generators.

The gradient tests compare analytic derivatives against central finite
differences, which is only meaningful away from the renderer's intrinsic
discontinuities (depth-sort order flips, the 0.99 opacity clamp, the 1e-4
transmittance early exit, cull boundaries). fd_safe_scene_camera builds
scene/camera pairs that keep a margin from all of them.
"""

from __future__ import annotations

import numpy as np
import pytest

from splatforge import Scene, render
from splatforge.synth import orbit_cameras, random_scene

FD_MIN_DEPTH_SEPARATION = 0.05


def camera_depths(scene: Scene, cam) -> np.ndarray:
    return (scene.positions - cam.position) @ cam.orientation[2]


def fd_safe_scene_camera(seed: int, n_gaussians: int = 8, width: int = 24,
                         height: int = 24):
    """Scene/camera pair with a margin from blending discontinuities.

    Opacities stay <= 0.6 so stacked transmittance cannot cross the 1e-4
    early-exit threshold (0.4^8 = 6.5e-4) and the 0.99 clamp stays far;
    camera-space depths are rejection-sampled to pairwise separation well
    above the finite-difference step.
    """
    for attempt in range(200):
        s = seed * 1000 + attempt
        scene = random_scene(n_gaussians, seed=s, bounds=0.7,
                             scale_range=(0.05, 0.3),
                             opacity_range=(0.2, 0.6))
        cam = orbit_cameras(1, seed=s + 7, radius=3.0, width=width,
                            height=height)[0]
        z = (scene.positions - cam.position) @ cam.orientation[2]
        zs = np.sort(z)
        if n_gaussians >= 2 and np.min(np.diff(zs)) <= FD_MIN_DEPTH_SEPARATION:
            continue
        p_cam = (scene.positions - cam.position) @ cam.orientation.T
        u = cam.fx * p_cam[:, 0] / p_cam[:, 2] + width / 2.0
        v = cam.fy * p_cam[:, 1] / p_cam[:, 2] + height / 2.0
        margin = 3.0
        if (np.all(z > cam.near + 0.5)
                and np.all((u > margin) & (u < width - margin))
                and np.all((v > margin) & (v < height - margin))):
            return scene, cam
    raise RuntimeError("could not build a depth-separated scene")


def perturbed_scene(scene: Scene, field: str, gaussian: int, component: int,
                    delta: float) -> Scene:
    """Copy of the scene with one scalar parameter shifted by delta."""
    arrays = {
        "positions": scene.positions,
        "log_scales": scene.log_scales,
        "rotations": scene.rotations,
        "opacity_logits": scene.opacity_logits,
        "colors": scene.colors,
    }
    arr = arrays[field].copy()
    if arr.ndim == 1:
        arr[gaussian] += delta
    else:
        arr[gaussian, component] += delta
    arrays[field] = arr
    return Scene(background=scene.background, **arrays)


def weighted_render_sum(scene: Scene, cam, f, grad_image: np.ndarray) -> float:
    return float(np.sum(render(scene, cam, f).image * grad_image))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
