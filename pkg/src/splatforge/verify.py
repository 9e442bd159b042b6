"""Runnable property suites with JSON-serializable pass/fail rows.

Each suite re-checks one of the package's verified claims on freshly
sampled inputs: quantized upscale round-trips, the Chebyshev concentration
bound, the two-scale footprint filter, analytic gradients against finite
differences, and render-vs-downsample consistency. Suites return
VerifyCheck rows; callers decide how to report them.
"""

from __future__ import annotations

import numpy as np

from . import rng
from .pseudo_gt import SynthesizerRequest, SyntheticBackend
from .rasterize import FilterSpec, render, render_backward
from .resampling import (
    VerifyCheck,
    WeightKernel,
    chebyshev_sample_size,
    concentration_trial,
    downsample_image,
    render_interp_consistency,
)
from .scene import Image, InvalidInputError, Scene, quantize_array
from .synth import orbit_cameras, random_scene

SUITE_NAMES = ("interp", "chebyshev", "filter", "gradients", "consistency")

PARAM_FIELDS = (("positions", 3), ("log_scales", 3), ("rotations", 4),
                ("opacity_logits", 1), ("colors", 3))


def verify_interp(seed: int = 0, images_per_scale: int = 100,
                  size: int = 8) -> list[VerifyCheck]:
    """Synthetic upscales must downsample back to the exact source."""
    backend = SyntheticBackend()
    kernel = WeightKernel.gaussian()
    checks = []
    for a in (2, 4, 8):
        worst = 0
        gen = rng.stream(seed, "verify-interp", a)
        for k in range(images_per_scale):
            src = gen.integers(0, 256, (size, size, 3), dtype=np.uint8)
            req = SynthesizerRequest(source=Image(pixels=src), mode="upscale",
                                     scale=a, seed=int(gen.integers(0, 2**31)))
            up = backend.synthesize(req).pixels
            down = downsample_image(up, a, kernel)
            worst = max(worst, int(np.abs(
                down.astype(np.int64) - src.astype(np.int64)).max()))
        checks.append(VerifyCheck(
            check="interp-round-trip",
            params={"scale": a, "images": images_per_scale, "seed": seed},
            value=float(worst), bound=0.0, passed=worst == 0))
    return checks


def verify_chebyshev(sigma: float = 1.0, epsilon: float = 0.1,
                     tau_p: float = 0.01, trials: int = 100_000,
                     seed: int = 0) -> list[VerifyCheck]:
    """Empirical concentration violation rate must respect the bound."""
    n_s = chebyshev_sample_size(sigma, epsilon, tau_p)
    rate = concentration_trial(n_s, epsilon, trials, seed)
    return [VerifyCheck(
        check="chebyshev-concentration",
        params={"sigma": sigma, "epsilon": epsilon, "tau_p": tau_p,
                "n_s": n_s, "trials": trials, "seed": seed},
        value=rate, bound=tau_p, passed=rate <= tau_p)]


def _two_scale_scenes(seed: int, n_subpixel: int):
    """Smooth backdrop plus sub-pixel Gaussians, and a color-flipped copy."""
    backdrop = random_scene(5, seed=seed, bounds=0.5, scale_range=(0.25, 0.5),
                            opacity_range=(0.4, 0.7), smooth=True)
    gen = rng.stream(seed, "two-scale-filter")
    positions = gen.uniform(-0.4, 0.4, (n_subpixel, 3))
    # ~0.3 px footprint at the base view: under a 1 px barrier until ~4x zoom.
    log_scales = np.full((n_subpixel, 3), np.log(0.013))
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n_subpixel, 1))
    opacity_logits = np.full(n_subpixel, 1.5)
    colors = gen.uniform(0.0, 1.0, (n_subpixel, 3))

    def build(c):
        return Scene(
            positions=np.concatenate([backdrop.positions, positions]),
            log_scales=np.concatenate([backdrop.log_scales, log_scales]),
            rotations=np.concatenate([backdrop.rotations, rotations]),
            opacity_logits=np.concatenate([backdrop.opacity_logits,
                                           opacity_logits]),
            colors=np.concatenate([backdrop.colors, c]),
            background=backdrop.background,
        )

    return build(colors), build(1.0 - colors)


def verify_filter(seed: int = 0, n_subpixel: int = 50,
                  zoom: int = 4) -> list[VerifyCheck]:
    """Sub-pixel content must be invisible at base scale, visible zoomed.

    Renders a scene and a copy with the sub-pixel Gaussians' colors
    flipped. Under the footprint barrier the base-scale quantized renders
    may differ by at most 1 unit; the zoomed renders must differ by at
    least 10 units somewhere, or the filter threw away real detail.
    """
    from .cameras import zoom_in_camera
    scene, flipped = _two_scale_scenes(seed, n_subpixel)
    cam = orbit_cameras(1, seed=seed + 1, radius=3.0, width=64, height=64)[0]
    f = FilterSpec(min_footprint_px=1.0)

    def delta(camera):
        a = quantize_array(render(scene, camera, f).image).astype(np.int64)
        b = quantize_array(render(flipped, camera, f).image).astype(np.int64)
        return int(np.abs(a - b).max())

    base = delta(cam)
    zoomed = delta(zoom_in_camera(cam, float(zoom)))
    return [
        VerifyCheck(check="filter-base-scale",
                    params={"n_subpixel": n_subpixel, "seed": seed},
                    value=float(base), bound=1.0, passed=base <= 1),
        VerifyCheck(check="filter-zoomed",
                    params={"n_subpixel": n_subpixel, "zoom": zoom,
                            "seed": seed},
                    value=float(zoomed), bound=10.0, passed=zoomed >= 10),
    ]


def _gradient_safe_pair(seed: int, n_gaussians: int = 8, width: int = 24,
                        height: int = 24):
    """Scene/camera pair away from blending discontinuities.

    Depth gaps keep the sort order stable under finite-difference nudges;
    modest opacities keep the early-exit threshold and the 0.99 clamp far;
    projected centers must land inside the image with a margin.
    """
    for attempt in range(200):
        s = seed * 1000 + attempt
        scene = random_scene(n_gaussians, seed=s, bounds=0.7,
                             scale_range=(0.05, 0.3),
                             opacity_range=(0.2, 0.6), min_depth_gap=0.06)
        cam = orbit_cameras(1, seed=s + 7, radius=3.0, width=width,
                            height=height)[0]
        p_cam = (scene.positions - cam.position) @ cam.orientation.T
        z = p_cam[:, 2]
        if np.any(z <= cam.near + 0.5):
            continue
        u = cam.fx * p_cam[:, 0] / z + width / 2.0
        v = cam.fy * p_cam[:, 1] / z + height / 2.0
        margin = 3.0
        if (np.all((u > margin) & (u < width - margin))
                and np.all((v > margin) & (v < height - margin))):
            return scene, cam
    raise InvalidInputError("could not sample a well-separated scene")


def _perturb(scene: Scene, group: str, index: int, component: int,
             delta: float) -> Scene:
    arrays = {g: getattr(scene, g) for g, _ in PARAM_FIELDS}
    arr = arrays[group].copy()
    if arr.ndim == 1:
        arr[index] += delta
    else:
        arr[index, component] += delta
    arrays[group] = arr
    return Scene(background=scene.background, **arrays)


def verify_gradients(seed: int = 0, n_scenes: int = 5,
                     samples_per_scene: int = 20,
                     step: float = 1e-4) -> list[VerifyCheck]:
    """Analytic parameter gradients must match central finite differences.

    The loss is a random linear functional of the rendered image. Each
    sampled component passes when |analytic - fd| <= max(1e-3 |fd|, 1e-6);
    the reported value is the worst ratio against that allowance.
    """
    f = FilterSpec()
    worst = 0.0
    checked = 0
    gen = rng.stream(seed, "verify-gradients")
    for si in range(n_scenes):
        scene, cam = _gradient_safe_pair(seed * 100 + si)
        grad_image = gen.uniform(-1.0, 1.0, (cam.height, cam.width, 3))
        grads = render_backward(scene, cam, f, grad_image)
        for _ in range(samples_per_scene):
            gi = int(gen.integers(0, len(scene)))
            group, width = PARAM_FIELDS[int(gen.integers(0, len(PARAM_FIELDS)))]
            comp = int(gen.integers(0, width))
            analytic = getattr(grads, group)[gi] if width == 1 else \
                getattr(grads, group)[gi, comp]

            def value_at(delta):
                moved = _perturb(scene, group, gi, comp, delta)
                return float(np.sum(render(moved, cam, f).image * grad_image))

            fd = (value_at(step) - value_at(-step)) / (2 * step)
            allowance = max(1e-3 * abs(fd), 1e-6)
            worst = max(worst, abs(analytic - fd) / allowance)
            checked += 1
    return [VerifyCheck(
        check="gradients-vs-finite-differences",
        params={"scenes": n_scenes, "samples": checked, "step": step,
                "seed": seed},
        value=float(worst), bound=1.0, passed=bool(worst <= 1.0))]


def verify_consistency(seed: int = 0, a: int = 2) -> list[VerifyCheck]:
    """Zoomed render must match the downsampled fine render of the view."""
    scene = random_scene(8, seed=seed, bounds=0.5, scale_range=(0.25, 0.5),
                         opacity_range=(0.4, 0.8), smooth=True)
    cam = orbit_cameras(1, seed=seed + 3, radius=3.0, width=64, height=64)[0]
    deviation = render_interp_consistency(scene, cam, a)
    return [VerifyCheck(
        check="render-interp-consistency",
        params={"scale": a, "seed": seed},
        value=float(deviation), bound=2.0, passed=deviation <= 2)]


_SUITES = {
    "interp": verify_interp,
    "chebyshev": verify_chebyshev,
    "filter": verify_filter,
    "gradients": verify_gradients,
    "consistency": verify_consistency,
}


def run_suites(names, seed: int = 0) -> list[VerifyCheck]:
    """Run the named suites ("all" expands to every suite) in order."""
    if isinstance(names, str):
        names = [names]
    expanded = []
    for name in names:
        if name == "all":
            expanded.extend(SUITE_NAMES)
        elif name in _SUITES:
            expanded.append(name)
        else:
            raise InvalidInputError(
                f"unknown suite {name!r}; pick from {SUITE_NAMES + ('all',)}")
    checks = []
    for name in expanded:
        checks.extend(_SUITES[name](seed=seed))
    return checks
