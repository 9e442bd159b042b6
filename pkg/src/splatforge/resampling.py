"""Weighted downsampling, rounding flexibility, and concentration checks.

The downsampling side: a quantized low-resolution pixel is a weighted,
rounded average of the a x a high-resolution tile behind it, so any tile
edit whose weighted effect stays inside the rounding slack leaves the
quantized result untouched. The concentration side: Chebyshev sample
counts and Monte-Carlo trials quantifying how averaging suppresses
zero-mean noise. Everything here is deterministic given explicit seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .cameras import zoom_in_camera
from .rasterize import FilterSpec, render
from .scene import Camera, InvalidInputError, Scene, quantize_array

KERNEL_KINDS = ("uniform", "gaussian", "bilinear")


@dataclass(frozen=True)
class WeightKernel:
    """Downsampling weight profile evaluated on tile distances d_ij.

    gaussian uses sigma (default a/2 at evaluation time); bilinear is
    max(0, 1 - d/a). Weights are normalized to sum 1 over the tile.
    """

    kind: str = "gaussian"
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise InvalidInputError(
                f"kernel kind {self.kind!r} not in {KERNEL_KINDS}")
        if self.sigma is not None and self.sigma <= 0:
            raise InvalidInputError("kernel sigma must be > 0")

    @classmethod
    def uniform(cls) -> "WeightKernel":
        return cls(kind="uniform")

    @classmethod
    def gaussian(cls, sigma: float | None = None) -> "WeightKernel":
        return cls(kind="gaussian", sigma=sigma)

    @classmethod
    def bilinear(cls) -> "WeightKernel":
        return cls(kind="bilinear")

    def weights(self, a: int) -> np.ndarray:
        """Normalized (a, a) weight matrix."""
        if a < 1:
            raise InvalidInputError("tile side must be >= 1")
        ii, jj = np.mgrid[0:a, 0:a]
        d = np.sqrt((ii - a / 2.0) ** 2 + (jj - a / 2.0) ** 2)
        if self.kind == "uniform":
            w = np.ones((a, a))
        elif self.kind == "gaussian":
            sigma = self.sigma if self.sigma is not None else a / 2.0
            w = np.exp(-0.5 * (d / sigma) ** 2)
        else:
            w = np.maximum(0.0, 1.0 - d / a)
        total = w.sum()
        if total <= 0:
            raise InvalidInputError("kernel weights sum to zero")
        return w / total


@dataclass(frozen=True)
class FlexibilityThresholds:
    """tau_v: quantized channel units; tau_n: noise units; tau_p: probability.

    tau_v defaults to 0.49: for a normalized kernel, per-pixel deviations
    bounded by 0.49 move the weighted average by < 0.5, which rounding
    absorbs.
    """

    tau_v: float = 0.49
    tau_n: float = 0.1
    tau_p: float = 0.01

    def __post_init__(self):
        if self.tau_v <= 0:
            raise InvalidInputError("tau_v must be > 0")
        if self.tau_n <= 0:
            raise InvalidInputError("tau_n must be > 0")
        if not 0 < self.tau_p < 1:
            raise InvalidInputError("tau_p must be in (0, 1)")


def interp_distance(i: int, j: int, a: int) -> float:
    """Distance of tile cell (i, j) from the tile's reference point a/2."""
    if a < 1:
        raise InvalidInputError("tile side must be >= 1")
    if not (0 <= i < a and 0 <= j < a):
        raise InvalidInputError(f"indices ({i}, {j}) outside [0, {a})")
    return math.sqrt((i - a / 2.0) ** 2 + (j - a / 2.0) ** 2)


def round_half_up(x: np.ndarray) -> np.ndarray:
    """Round with ties going up, matching integer pixel quantization."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def _check_tile(tile: np.ndarray) -> np.ndarray:
    tile = np.asarray(tile, dtype=np.float64)
    if tile.ndim not in (2, 3) or tile.shape[0] != tile.shape[1]:
        raise InvalidInputError(f"tile must be (a, a[, C]), got {tile.shape}")
    return tile


def weighted_average(tile: np.ndarray, kernel: WeightKernel) -> np.ndarray:
    """Real-valued weighted tile average (no rounding), per channel."""
    tile = _check_tile(tile)
    w = kernel.weights(tile.shape[0])
    if tile.ndim == 2:
        return np.asarray((w * tile).sum())
    return np.tensordot(w, tile, axes=([0, 1], [0, 1]))


def weighted_downsample(tile: np.ndarray, kernel: WeightKernel):
    """Quantized weighted tile average: round half up, clamp to [0, 255].

    Returns an int for a single-channel (a, a) tile, a (C,) uint8 array
    for an (a, a, C) tile.
    """
    avg = weighted_average(tile, kernel)
    q = np.clip(round_half_up(avg), 0, 255)
    if q.ndim == 0:
        return int(q)
    return q.astype(np.uint8)


def downsample_image(image: np.ndarray, a: int,
                     kernel: WeightKernel) -> np.ndarray:
    """Downsample an (H, W[, C]) quantized image by a per non-overlapping
    a x a tile; H and W must be divisible by a."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (2, 3):
        raise InvalidInputError("image must be (H, W[, C])")
    h, w = image.shape[:2]
    if a < 1 or h % a or w % a:
        raise InvalidInputError(
            f"resolution {h}x{w} not divisible by tile side {a}")
    wk = kernel.weights(a)
    tiles = image.reshape(h // a, a, w // a, a, -1)
    avg = np.einsum("ij,hiwjc->hwc", wk, tiles)
    out = np.clip(round_half_up(avg), 0, 255).astype(np.uint8)
    if image.ndim == 2:
        return out[:, :, 0]
    return out


def rounding_flexible(p_o, tile: np.ndarray, kernel: WeightKernel) -> bool:
    """True iff the tile still downsamples to exactly p_o."""
    got = weighted_downsample(tile, kernel)
    return bool(np.array_equal(np.asarray(got), np.asarray(p_o)))


def within_flexibility_bound(p_o, tile: np.ndarray,
                             thresholds: FlexibilityThresholds
                             = FlexibilityThresholds()) -> bool:
    """Sufficient condition for rounding_flexible: every tile entry within
    tau_v of p_o. Normalized weights then keep the average within tau_v
    < 0.5 of p_o, which rounding cannot see."""
    tile = _check_tile(tile)
    slack = 1e-9 * max(1.0, thresholds.tau_v)  # representation noise only
    return bool(np.max(np.abs(tile - np.asarray(p_o, dtype=np.float64)))
                <= thresholds.tau_v + slack)


def chebyshev_sample_size(sigma: float, epsilon: float, tau_p: float) -> int:
    """Smallest n with sigma^2 / (n epsilon^2) <= tau_p.

    The exact ratio is snapped to a nearby integer before the ceiling so
    analytically integral cases (e.g. 1/(0.04*0.25) = 100) do not drift
    up by one from float representation error.
    """
    if sigma <= 0 or epsilon <= 0:
        raise InvalidInputError("sigma and epsilon must be > 0")
    if not 0 < tau_p < 1:
        raise InvalidInputError("tau_p must be in (0, 1)")
    ratio = sigma * sigma / (tau_p * epsilon * epsilon)
    nearest = round(ratio)
    if abs(ratio - nearest) < 1e-9 * max(1.0, abs(nearest)):
        return max(int(nearest), 1)
    return max(int(math.ceil(ratio)), 1)


def concentration_trial(n_s: int, tau_n: float, trials: int,
                        seed: int) -> float:
    """Fraction of trials where |mean of n_s standard normal draws| >= tau_n.

    Draws are generated in fixed-size blocks (float32 variates, float64
    means) so a billion-draw run fits in memory and stays deterministic.
    """
    if n_s < 1 or trials < 1:
        raise InvalidInputError("n_s and trials must be >= 1")
    if tau_n < 0:
        raise InvalidInputError("tau_n must be >= 0")
    gen = rng.stream(seed, "concentration-trial")
    block = max(1, (1 << 24) // n_s)
    violations = 0
    done = 0
    while done < trials:
        m = min(block, trials - done)
        draws = gen.standard_normal((m, n_s), dtype=np.float32)
        means = draws.mean(axis=1, dtype=np.float64)
        violations += int(np.count_nonzero(np.abs(means) >= tau_n))
        done += m
    return violations / trials


@dataclass(frozen=True)
class NoiseCompareResult:
    """Monte-Carlo estimates of E[f(mean)] vs E[mean of f], with standard
    errors; holds = lhs >= rhs (signed comparison)."""

    lhs: float
    rhs: float
    lhs_stderr: float
    rhs_stderr: float
    holds: bool

    def __iter__(self):
        return iter((self.lhs, self.rhs))


def noise_averaging_compare(f, n_s: int, trials: int = 100_000,
                            seed: int = 0) -> NoiseCompareResult:
    """Compare applying f after averaging n_s unit noises (lhs) against
    averaging f of each noise (rhs). f must map arrays elementwise."""
    if n_s < 1 or trials < 1:
        raise InvalidInputError("n_s and trials must be >= 1")
    gen = rng.stream(seed, "noise-averaging")
    block = max(1, (1 << 22) // n_s)
    lhs_sum = lhs_sq = rhs_sum = rhs_sq = 0.0
    done = 0
    while done < trials:
        m = min(block, trials - done)
        draws = gen.standard_normal((m, n_s))
        lhs_vals = np.asarray(f(draws.mean(axis=1)), dtype=np.float64)
        rhs_vals = np.asarray(f(draws), dtype=np.float64).mean(axis=1)
        if not (np.all(np.isfinite(lhs_vals)) and np.all(np.isfinite(rhs_vals))):
            raise InvalidInputError("test function returned non-finite values")
        lhs_sum += lhs_vals.sum()
        lhs_sq += (lhs_vals ** 2).sum()
        rhs_sum += rhs_vals.sum()
        rhs_sq += (rhs_vals ** 2).sum()
        done += m
    lhs = lhs_sum / trials
    rhs = rhs_sum / trials
    lhs_var = max(lhs_sq / trials - lhs * lhs, 0.0)
    rhs_var = max(rhs_sq / trials - rhs * rhs, 0.0)
    return NoiseCompareResult(
        lhs=lhs, rhs=rhs,
        lhs_stderr=math.sqrt(lhs_var / trials),
        rhs_stderr=math.sqrt(rhs_var / trials),
        holds=lhs >= rhs)


def render_interp_consistency(scene: Scene, cam: Camera, a: int,
                              kernel: WeightKernel | None = None,
                              f: FilterSpec = FilterSpec()) -> int:
    """Max quantized deviation between rendering a zoomed view directly
    and downsampling an a-times-finer render of the same view.

    Both renders share zoom_in_camera(cam, a): the direct one at the
    camera's own resolution, the fine one at a times that resolution, so
    each direct pixel sits exactly behind an a x a tile of fine pixels.
    """
    if a < 1:
        raise InvalidInputError("zoom factor must be >= 1")
    if kernel is None:
        kernel = WeightKernel.gaussian()
    zc = zoom_in_camera(cam, float(a))
    direct = quantize_array(render(scene, zc, f).image)
    fine_cam = zc.with_resolution(zc.width * a, zc.height * a)
    fine = quantize_array(render(scene, fine_cam, f).image)
    down = downsample_image(fine, a, kernel)
    return int(np.abs(direct.astype(np.int64) - down.astype(np.int64)).max())


@dataclass(frozen=True)
class VerifyCheck:
    """One verifier result row; serializes with the key 'pass'."""

    check: str
    params: dict
    value: float
    bound: float
    passed: bool

    def to_json_dict(self) -> dict:
        # Cast so numpy scalars cannot leak into json.dumps.
        return {"check": self.check, "params": self.params,
                "value": float(self.value), "bound": float(self.bound),
                "pass": bool(self.passed)}
