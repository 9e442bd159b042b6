"""Differentiable tile-based rasterizer for 3D Gaussian scenes.

Forward: EWA-style projection of each Gaussian to a 2D splat, screen-space
dilation filter, per-tile front-to-back alpha blending with depth ordering
(ties broken by Gaussian index), transmittance early exit below 1e-4 and
per-splat opacity clamped to 0.99.

Backward: analytic gradients of sum(grad_image * rendered) with respect to
position, log-scale, rotation quaternion, opacity logit and color. The
blending is recomputed per tile rather than stored, and per-tile partial
gradients are accumulated in tile index order so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._kernels import backward_tiles, forward_tiles
from .scene import Camera, InvalidInputError, Scene, quat_to_rotmat, sigmoid

TILE = 16
EARLY_EXIT_T = 1e-4
OPACITY_CLAMP = 0.99
SINGULAR_DET = 1e-12
# Gaussians are binned to tiles within this many standard deviations of
# their mean. exp(-0.5 * 7^2) ~ 2e-11, far below the 1e-6 agreement the
# naive-renderer equivalence tests demand even when dozens of tails stack.
BIN_RADIUS_SIGMA = 7.0


@dataclass(frozen=True)
class FilterSpec:
    """Screen-space low-pass filter parameters.

    dilation_variance is added to both cov2d eigenvalues (pixels^2);
    cull_radius_sigma controls view culling; splats whose pre-dilation
    footprint sqrt(lambda_max) is below min_footprint_px are treated as
    filtered-out high-frequency content (0 disables the barrier).
    """

    dilation_variance: float = 0.3
    cull_radius_sigma: float = 3.0
    min_footprint_px: float = 0.0

    def __post_init__(self):
        if self.dilation_variance < 0:
            raise InvalidInputError("dilation_variance must be >= 0")


@dataclass(frozen=True)
class Splat2D:
    """One projected Gaussian: pixel-space mean, 2x2 covariance, depth."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    index: int
    filtered: bool = False


@dataclass(frozen=True)
class RenderOutput:
    image: np.ndarray          # (H, W, 3) float in [0, 1]
    transmittance: np.ndarray  # (H, W) final per-pixel transmittance
    tile_counts: np.ndarray    # (N,) tiles each Gaussian was binned to
    n_skipped_singular: int = 0


class _Projected:
    """Arrays for the splats that survive culling, depth-sorted (internal)."""

    __slots__ = ("indices", "mean2d", "cov_pre", "cov2d", "depth", "p_cam",
                 "alpha", "color", "n_skipped_singular")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def _eig_max(cov: np.ndarray) -> np.ndarray:
    """Largest eigenvalue of (..., 2, 2) symmetric matrices."""
    a, b, c = cov[..., 0, 0], cov[..., 0, 1], cov[..., 1, 1]
    mid = 0.5 * (a + c)
    disc = np.sqrt(np.maximum((0.5 * (a - c)) ** 2 + b * b, 0.0))
    return mid + disc


def _project(scene: Scene, cam: Camera, f: FilterSpec) -> _Projected:
    """Project all Gaussians, apply culling and the filter, sort by depth.

    Pipeline order (shared with the reference renderer): near-plane cull,
    min-footprint filter on the pre-dilation covariance, bounds cull with
    the pre-dilation extent, dilation, singular skip, (depth, index) sort.
    """
    W = cam.orientation
    fx, fy = cam.fx, cam.fy
    p_cam = (scene.positions - cam.position) @ W.T
    keep = p_cam[:, 2] > cam.near
    idx = np.nonzero(keep)[0]
    p_cam = p_cam[idx]
    X, Y, Z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]

    R = quat_to_rotmat(scene.rotations[idx]) if idx.size else np.zeros((0, 3, 3))
    s = np.exp(scene.log_scales[idx])
    RS = R * s[:, None, :]
    cov3 = RS @ np.swapaxes(RS, 1, 2)

    n = idx.size
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / Z
    J[:, 0, 2] = -fx * X / Z ** 2
    J[:, 1, 1] = fy / Z
    J[:, 1, 2] = -fy * Y / Z ** 2
    JW = J @ W
    cov_pre = JW @ cov3 @ np.swapaxes(JW, 1, 2)
    cov_pre = 0.5 * (cov_pre + np.swapaxes(cov_pre, 1, 2))

    lam_pre = _eig_max(cov_pre)
    footprint = np.sqrt(np.maximum(lam_pre, 0.0))
    filtered = (footprint < f.min_footprint_px if f.min_footprint_px > 0
                else np.zeros(n, dtype=bool))
    mean2d = np.stack([fx * X / Z + cam.width / 2.0,
                       fy * Y / Z + cam.height / 2.0], axis=1)
    radius = f.cull_radius_sigma * footprint
    in_bounds = ((mean2d[:, 0] >= -radius) & (mean2d[:, 0] <= cam.width + radius)
                 & (mean2d[:, 1] >= -radius) & (mean2d[:, 1] <= cam.height + radius))

    cov2d = cov_pre.copy()
    cov2d[:, 0, 0] += f.dilation_variance
    cov2d[:, 1, 1] += f.dilation_variance
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    nonsingular = det > SINGULAR_DET

    keep2 = in_bounds & ~filtered & nonsingular
    n_singular = int(np.count_nonzero(in_bounds & ~filtered & ~nonsingular))
    order = np.lexsort((idx[keep2], Z[keep2]))  # depth first, index on ties
    sel = np.nonzero(keep2)[0][order]
    return _Projected(
        indices=idx[sel],
        mean2d=mean2d[sel],
        cov_pre=cov_pre[sel],
        cov2d=cov2d[sel],
        depth=Z[sel],
        p_cam=p_cam[sel],
        alpha=sigmoid(scene.opacity_logits[idx[sel]]),
        color=scene.colors[idx[sel]],
        n_skipped_singular=n_singular,
    )


def project_gaussian(g, cam: Camera, f: FilterSpec = FilterSpec()):
    """Project one Gaussian; returns a pre-dilation Splat2D or None if culled.

    The returned covariance has no dilation applied; pass the result
    through apply_filter for the render-time covariance.
    """
    single = Scene(positions=g.position[None], log_scales=g.log_scale[None],
                   rotations=g.rotation[None],
                   opacity_logits=np.array([g.opacity_logit]),
                   colors=g.color[None])
    # projection only culls; the footprint barrier belongs to apply_filter
    proj = _project(single, cam,
                    replace(f, min_footprint_px=0.0, dilation_variance=0.0))
    if proj.indices.size == 0:
        return None
    return Splat2D(mean2d=proj.mean2d[0], cov2d=proj.cov_pre[0],
                   depth=float(proj.depth[0]), index=0)


def apply_filter(s: Splat2D, f: FilterSpec) -> Splat2D:
    """Dilate a splat's covariance; mark it filtered if its pre-dilation
    footprint falls below min_footprint_px."""
    lam = float(_eig_max(s.cov2d[None])[0])
    filtered = bool(f.min_footprint_px > 0
                    and np.sqrt(max(lam, 0.0)) < f.min_footprint_px)
    return Splat2D(mean2d=s.mean2d,
                   cov2d=s.cov2d + f.dilation_variance * np.eye(2),
                   depth=s.depth, index=s.index, filtered=filtered)


def _tile_bins(proj: _Projected, width: int, height: int):
    """Per-tile index lists into the sorted splat arrays."""
    n_tx = (width + TILE - 1) // TILE
    n_ty = (height + TILE - 1) // TILE
    r = BIN_RADIUS_SIGMA * np.sqrt(np.maximum(_eig_max(proj.cov2d), 0.0))
    x0 = np.clip(((proj.mean2d[:, 0] - r) // TILE).astype(int), 0, n_tx - 1)
    x1 = np.clip(((proj.mean2d[:, 0] + r) // TILE).astype(int), 0, n_tx - 1)
    y0 = np.clip(((proj.mean2d[:, 1] - r) // TILE).astype(int), 0, n_ty - 1)
    y1 = np.clip(((proj.mean2d[:, 1] + r) // TILE).astype(int), 0, n_ty - 1)
    outside = ((proj.mean2d[:, 0] + r < 0) | (proj.mean2d[:, 0] - r > width)
               | (proj.mean2d[:, 1] + r < 0) | (proj.mean2d[:, 1] - r > height))
    bins: list[list[int]] = [[] for _ in range(n_tx * n_ty)]
    for k in range(proj.indices.size):
        if outside[k]:
            continue
        for ty in range(y0[k], y1[k] + 1):
            for tx in range(x0[k], x1[k] + 1):
                bins[ty * n_tx + tx].append(k)
    return n_tx, n_ty, [np.asarray(b, dtype=int) for b in bins]


def _inv2x2(cov: np.ndarray) -> np.ndarray:
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    inv = np.empty_like(cov)
    inv[:, 0, 0] = cov[:, 1, 1]
    inv[:, 1, 1] = cov[:, 0, 0]
    inv[:, 0, 1] = -cov[:, 0, 1]
    inv[:, 1, 0] = -cov[:, 1, 0]
    return inv / det[:, None, None]


def _csr_bins(proj: _Projected, width: int, height: int):
    """Flatten the per-tile member lists into a CSR layout for the kernels."""
    n_tx, n_ty, bins = _tile_bins(proj, width, height)
    starts = np.zeros(len(bins) + 1, dtype=np.int64)
    np.cumsum([b.size for b in bins], out=starts[1:])
    members = (np.concatenate(bins) if starts[-1] else
               np.empty(0, dtype=np.int64)).astype(np.int64)
    return n_tx, n_ty, bins, starts, members


def _inv_components(cov2d: np.ndarray):
    inv = _inv2x2(cov2d)
    return (np.ascontiguousarray(inv[:, 0, 0]),
            np.ascontiguousarray(inv[:, 0, 1]),
            np.ascontiguousarray(inv[:, 1, 1]))


def render(scene: Scene, cam: Camera, f: FilterSpec = FilterSpec()) -> RenderOutput:
    """Rasterize a scene. An empty scene renders as pure background."""
    h, w = cam.height, cam.width
    bg = scene.background
    image = np.empty((h, w, 3))
    image[:] = bg
    trans = np.ones((h, w))
    tile_counts = np.zeros(len(scene), dtype=int)
    if len(scene) == 0:
        return RenderOutput(image, trans, tile_counts, 0)

    proj = _project(scene, cam, f)
    if proj.indices.size == 0:
        return RenderOutput(image, trans, tile_counts, proj.n_skipped_singular)
    a00, a01, a11 = _inv_components(proj.cov2d)
    n_tx, n_ty, bins, starts, members = _csr_bins(proj, w, h)
    for b in bins:
        np.add.at(tile_counts, proj.indices[b], 1)
    forward_tiles(proj.mean2d, a00, a01, a11, proj.alpha, proj.color,
                  np.asarray(bg, dtype=np.float64), starts, members,
                  n_tx, n_ty, w, h, TILE, EARLY_EXIT_T, OPACITY_CLAMP,
                  image, trans)
    return RenderOutput(image, trans, tile_counts, proj.n_skipped_singular)


def clamp_min_scales(scene: Scene, cameras, sampling_fraction: float = 0.2) -> Scene:
    """Optional preprocessing: floor each Gaussian's world-space scale at
    sampling_fraction pixels under the finest sampling rate any camera
    applies to it (fx / depth). Gaussians no camera sees are unchanged.

    Off by default everywhere; callers opt in before training or rendering
    to suppress sub-pixel detail that no training view can constrain.
    """
    if sampling_fraction <= 0:
        raise InvalidInputError("sampling_fraction must be > 0")
    rate = np.zeros(len(scene))
    for cam in cameras:
        z = (scene.positions - cam.position) @ cam.orientation[2]
        seen = z > cam.near
        rate[seen] = np.maximum(rate[seen], cam.fx / z[seen])
    floor = np.full(len(scene), -np.inf)
    visible = rate > 0
    floor[visible] = np.log(sampling_fraction / rate[visible])
    new_scales = np.maximum(scene.log_scales, floor[:, None])
    return Scene(positions=scene.positions, log_scales=new_scales,
                 rotations=scene.rotations, opacity_logits=scene.opacity_logits,
                 colors=scene.colors, background=scene.background)


@dataclass(frozen=True)
class ParamGradients:
    """dL/d{parameter} arrays aligned with the scene's Gaussian order."""

    positions: np.ndarray       # (N, 3)
    log_scales: np.ndarray      # (N, 3)
    rotations: np.ndarray       # (N, 4)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N, 3)

    @classmethod
    def zeros(cls, n: int) -> "ParamGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                   np.zeros(n), np.zeros((n, 3)))


def _rotmat_quat_jacobian(qhat: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions: (N, 3, 3, 4), q ordered (w, x, y, z)."""
    w, x, y, z = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    n = qhat.shape[0]
    D = np.zeros((n, 3, 3, 4))
    zero = np.zeros(n)
    D[..., 0] = 2.0 * np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1)], axis=1)
    D[..., 1] = 2.0 * np.stack([
        np.stack([zero, y, z], axis=-1),
        np.stack([y, -2 * x, -w], axis=-1),
        np.stack([z, w, -2 * x], axis=-1)], axis=1)
    D[..., 2] = 2.0 * np.stack([
        np.stack([-2 * y, x, w], axis=-1),
        np.stack([x, zero, z], axis=-1),
        np.stack([-w, z, -2 * y], axis=-1)], axis=1)
    D[..., 3] = 2.0 * np.stack([
        np.stack([-2 * z, -w, x], axis=-1),
        np.stack([w, -2 * z, y], axis=-1),
        np.stack([x, y, zero], axis=-1)], axis=1)
    return D


def render_backward(scene: Scene, cam: Camera, f: FilterSpec,
                    grad_image: np.ndarray) -> ParamGradients:
    """Gradients of L = sum(grad_image * render(scene, cam, f).image).

    Culled and filtered splats get zero gradients. The forward blending is
    recomputed tile by tile; per-tile partials accumulate in tile index
    order, so the result is independent of any internal parallelism.
    """
    grad_image = np.asarray(grad_image, dtype=np.float64)
    h, w = cam.height, cam.width
    if grad_image.shape != (h, w, 3):
        raise InvalidInputError(
            f"grad_image shape {grad_image.shape} != {(h, w, 3)}")
    if not np.all(np.isfinite(grad_image)):
        raise InvalidInputError("grad_image must be finite")

    out = ParamGradients.zeros(len(scene))
    if len(scene) == 0:
        return out
    proj = _project(scene, cam, f)
    m = proj.indices.size
    if m == 0:
        return out
    a00, a01, a11 = _inv_components(proj.cov2d)

    # accumulators in sorted-splat space
    g_mean2d = np.zeros((m, 2))
    g_cov00 = np.zeros(m)
    g_cov01 = np.zeros(m)
    g_cov11 = np.zeros(m)
    g_alpha = np.zeros(m)
    g_color = np.zeros((m, 3))

    bg = np.asarray(scene.background, dtype=np.float64)
    n_tx, n_ty, bins, starts, members = _csr_bins(proj, w, h)
    max_members = max((b.size for b in bins), default=0)
    backward_tiles(proj.mean2d, a00, a01, a11, proj.alpha, proj.color, bg,
                   starts, members, n_tx, n_ty, w, h, TILE, EARLY_EXIT_T,
                   OPACITY_CLAMP, max_members, grad_image,
                   g_mean2d, g_cov00, g_cov01, g_cov11, g_alpha, g_color)
    g_cov = np.empty((m, 2, 2))
    g_cov[:, 0, 0] = g_cov00
    g_cov[:, 0, 1] = g_cov01
    g_cov[:, 1, 0] = g_cov01
    g_cov[:, 1, 1] = g_cov11

    # ---- transform splat-space gradients to parameter gradients ----
    W = cam.orientation
    fx, fy = cam.fx, cam.fy
    X, Y, Z = proj.p_cam[:, 0], proj.p_cam[:, 1], proj.p_cam[:, 2]
    J = np.zeros((m, 2, 3))
    J[:, 0, 0] = fx / Z
    J[:, 0, 2] = -fx * X / Z ** 2
    J[:, 1, 1] = fy / Z
    J[:, 1, 2] = -fy * Y / Z ** 2

    qn = scene.rotations[proj.indices]
    norm = np.linalg.norm(qn, axis=1, keepdims=True)
    qhat = qn / norm
    R = quat_to_rotmat(qn)
    s = np.exp(scene.log_scales[proj.indices])
    cov3 = (R * (s * s)[:, None, :]) @ np.swapaxes(R, 1, 2)
    B = np.einsum("ij,njk,lk->nil", W, cov3, W)           # W cov3 W^T

    GV = 0.5 * (g_cov + np.swapaxes(g_cov, 1, 2))
    g_J = 2.0 * GV @ J @ B                                # V = J B J^T
    g_B = np.einsum("nji,njk,nkl->nil", J, GV, J)
    g_cov3 = np.einsum("ji,njk,kl->nil", W, g_B, W)
    g_cov3 = 0.5 * (g_cov3 + np.swapaxes(g_cov3, 1, 2))

    g_R = 2.0 * g_cov3 @ (R * (s * s)[:, None, :])        # cov3 = R D R^T
    RtGR = np.einsum("nji,njk,nkl->nil", R, g_cov3, R)
    g_log_scale = 2.0 * (s * s) * np.einsum("nii->ni", RtGR)

    D = _rotmat_quat_jacobian(qhat)
    g_qhat = np.einsum("nij,nijk->nk", g_R, D)
    g_quat = (g_qhat - np.sum(g_qhat * qhat, axis=1, keepdims=True) * qhat) / norm

    # position enters through mean2d (dmean2d/dp_cam = J) and through J
    g_pcam = np.einsum("nji,nj->ni", J, g_mean2d)
    gJ00, gJ02 = g_J[:, 0, 0], g_J[:, 0, 2]
    gJ11, gJ12 = g_J[:, 1, 1], g_J[:, 1, 2]
    g_pcam[:, 0] += gJ02 * (-fx / Z ** 2)
    g_pcam[:, 1] += gJ12 * (-fy / Z ** 2)
    g_pcam[:, 2] += (gJ00 * (-fx / Z ** 2) + gJ02 * (2.0 * fx * X / Z ** 3)
                     + gJ11 * (-fy / Z ** 2) + gJ12 * (2.0 * fy * Y / Z ** 3))
    g_position = g_pcam @ W

    alpha = proj.alpha
    out.positions[proj.indices] = g_position
    out.log_scales[proj.indices] = g_log_scale
    out.rotations[proj.indices] = g_quat
    out.opacity_logits[proj.indices] = g_alpha * alpha * (1.0 - alpha)
    out.colors[proj.indices] = g_color
    return out
