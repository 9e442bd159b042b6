"""Pseudo-ground-truth synthesis: upscaled targets and regenerated renders.

Two interchangeable backends produce the training targets. The synthetic
backend is pure and deterministic: it upscales by bicubic interpolation
plus seeded high-frequency detail constructed so every a x a tile of the
output still downsamples (weighted average, then rounding) to exactly the
source pixel. The remote backend posts JSON to a diffusion service and
supports record/replay fixtures so tests never need the service.
"""

from __future__ import annotations

import base64
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests
from scipy.ndimage import zoom as ndi_zoom

from . import rng
from .io import ParseError, decode_png, encode_png
from .resampling import WeightKernel
from .scene import Image, InvalidInputError, quantize_array

UPSCALE_FACTORS = (2, 4, 8)
DEFAULT_UPSCALE_PROMPT = "sharp, detailed, denoise, 8k"
DEFAULT_BOOTSTRAP_PROMPT = "sharp, denoise, original content, natural, detailed, 8k"


class SynthesisUnavailableError(RuntimeError):
    """The backend could not produce an image (transport failure, missing
    fixture). Callers should skip the refresh, not abort training."""


class ProtocolError(RuntimeError):
    """The backend answered, but with something other than the contract."""


@dataclass(frozen=True)
class SynthesizerRequest:
    """One synthesis call: the source image plus generation knobs."""

    source: Image
    mode: str  # "upscale" or "regenerate"
    scale: int = 1
    seed: int = 0
    prompt: str = ""
    guidance: float = 1.0
    steps: int = 1
    n_samples: int = 1

    def __post_init__(self):
        if self.mode not in ("upscale", "regenerate"):
            raise InvalidInputError(f"unknown mode {self.mode!r}")
        if self.mode == "upscale" and self.scale not in UPSCALE_FACTORS:
            raise InvalidInputError(
                f"upscale factor must be one of {UPSCALE_FACTORS}")
        if self.steps < 1:
            raise InvalidInputError("steps must be >= 1")
        if self.n_samples < 1:
            raise InvalidInputError("n_samples must be >= 1")
        if not isinstance(self.source, Image) or not self.source.quantized:
            raise InvalidInputError("source must be a quantized Image")

    def expected_shape(self) -> tuple[int, int]:
        h, w = self.source.pixels.shape[:2]
        if self.mode == "upscale":
            return h * self.scale, w * self.scale
        return h, w

    def wire_body(self) -> dict:
        return {
            "mode": self.mode,
            "scale": int(self.scale if self.mode == "upscale" else 1),
            "image_b64": base64.b64encode(encode_png(self.source)).decode(),
            "prompt": self.prompt,
            "steps": int(self.steps),
            "seed": int(self.seed),
            "guidance": float(self.guidance),
            "n_samples": int(self.n_samples),
        }


def request_fingerprint(body: dict) -> str:
    """Stable hash of a wire request (canonical JSON, sha256 hex)."""
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass(frozen=True)
class SyntheticBackendSpec:
    """Construction parameters for the deterministic local synthesizer.

    amplitude_bound is the per-channel budget (quantized units) for how
    far a tile's weighted average may drift from its source pixel; at the
    default 0.49 the quantized round-trip is exact. Detail beyond the
    source Nyquist lives in the kernel's null space, so only the
    per-sample tile offsets (active when the bound exceeds 0.5) move the
    averages at all.
    """

    amplitude_bound: float = 0.49
    kernel: WeightKernel = field(default_factory=WeightKernel.gaussian)
    interpolation_order: int = 3

    def __post_init__(self):
        if self.amplitude_bound < 0:
            raise InvalidInputError("amplitude_bound must be >= 0")
        if not 0 <= self.interpolation_order <= 5:
            raise InvalidInputError("interpolation_order must be in [0, 5]")


def _tile_weighted_avg(img: np.ndarray, a: int, w: np.ndarray) -> np.ndarray:
    h, wd, c = img.shape
    return np.einsum("ij,hiwjc->hwc", w, img.reshape(h // a, a, wd // a, a, c))


def _per_tile(x: np.ndarray, a: int) -> np.ndarray:
    return np.repeat(np.repeat(x, a, axis=0), a, axis=1)


def _repair_tiles(q: np.ndarray, source: np.ndarray, a: int, w: np.ndarray,
                  bound: float) -> np.ndarray:
    """Integer fix-up: nudge quantized tile pixels until every tile's
    weighted average is within `bound` of its source pixel.

    Works on the max-weight movable pixel first; if eight rounds cannot
    land inside the bound (extreme clipping), the tile goes flat at the
    source value, which satisfies the bound exactly.
    """
    work = q.astype(np.int64)
    h, wd, c = work.shape
    m = _tile_weighted_avg(work.astype(np.float64), a, w) - source
    slack = 1e-9
    bad = np.argwhere(np.abs(m) > bound + slack)
    order = np.argsort(w.reshape(-1))[::-1]
    wi, wj = np.unravel_index(order, (a, a))
    wsorted = w.reshape(-1)[order]
    for ty, tx, ch in bad:
        tile = work[ty * a:(ty + 1) * a, tx * a:(tx + 1) * a, ch]
        target = source[ty, tx, ch]
        dev = float((w * tile).sum() - target)
        for _ in range(8):
            if abs(dev) <= bound + slack:
                break
            moved = False
            for k in range(a * a):
                p_y, p_x, wt = wi[k], wj[k], wsorted[k]
                if wt <= 0:
                    break
                room = 255 - tile[p_y, p_x] if dev < 0 else tile[p_y, p_x]
                if room <= 0:
                    continue
                steps = min(int(np.ceil((abs(dev) - bound) / wt)), int(room))
                if steps <= 0:
                    continue
                tile[p_y, p_x] += steps if dev < 0 else -steps
                dev += wt * steps if dev < 0 else -wt * steps
                moved = True
                break
            if not moved:
                break
        if abs(dev) > bound + slack:
            tile[:] = target
    return np.clip(work, 0, 255).astype(np.uint8)


class SyntheticBackend:
    """Local deterministic synthesizer satisfying the downsample-
    consistency bound by construction."""

    def __init__(self, spec: SyntheticBackendSpec = SyntheticBackendSpec()):
        self.spec = spec

    def synthesize(self, req: SynthesizerRequest) -> Image:
        if req.mode == "upscale":
            return self._upscale(req)
        return self._regenerate(req)

    def _upscale(self, req: SynthesizerRequest) -> Image:
        src = req.source.pixels.astype(np.float64)
        a = req.scale
        w = self.spec.kernel.weights(a)
        bound = self.spec.amplitude_bound
        offset_amp = max(0.0, bound - 0.5)
        null_amp = bound - offset_amp
        base = ndi_zoom(src, (a, a, 1), order=self.spec.interpolation_order,
                        grid_mode=True, mode="nearest")
        # shift each tile so its weighted average equals the source exactly
        base = base + _per_tile(src - _tile_weighted_avg(base, a, w), a)
        acc = np.zeros_like(base)
        for k in range(req.n_samples):
            gen = rng.stream(req.seed, "synthetic-upscale", k)
            noise = gen.uniform(-1.0, 1.0, base.shape)
            null = noise - _per_tile(_tile_weighted_avg(noise, a, w), a)
            peak = np.abs(null).max()
            if peak > 0 and null_amp > 0:
                null *= null_amp / peak
            else:
                null[:] = 0.0
            sample = base + null
            if offset_amp > 0:
                sample = sample + _per_tile(
                    gen.uniform(-offset_amp, offset_amp, src.shape), a)
            acc += sample
        q = quantize_array(np.clip(acc / req.n_samples, 0.0, 255.0) / 255.0)
        q = _repair_tiles(q, src, a, w, bound)
        return Image(pixels=q)

    def _regenerate(self, req: SynthesizerRequest) -> Image:
        amp = self.spec.amplitude_bound
        if amp == 0:
            return Image(pixels=req.source.pixels.copy())
        src = req.source.pixels.astype(np.float64)
        acc = np.zeros_like(src)
        for k in range(req.n_samples):
            gen = rng.stream(req.seed, "synthetic-regenerate", k)
            acc += src + gen.uniform(-amp, amp, src.shape)
        q = quantize_array(np.clip(acc / req.n_samples, 0.0, 255.0) / 255.0)
        return Image(pixels=q)


@dataclass(frozen=True)
class RemoteDiffusionConfig:
    """Connection and generation defaults for a diffusion service."""

    endpoint: str
    upscale_prompt: str = DEFAULT_UPSCALE_PROMPT
    bootstrap_prompt: str = DEFAULT_BOOTSTRAP_PROMPT
    upscale_steps: int = 15
    bootstrap_steps: int = 1
    seed: int = 22
    upscale_guidance: float = 1.0
    bootstrap_guidance_start: float = 0.06
    bootstrap_guidance_end: float = 0.01
    timeout: float = 30.0
    max_retries: int = 3
    retry_backoff: float = 0.25
    max_in_flight: int = 4

    def __post_init__(self):
        if not self.endpoint:
            raise InvalidInputError("endpoint must be nonempty")
        if self.timeout <= 0:
            raise InvalidInputError("timeout must be > 0")
        if self.max_retries < 0 or self.retry_backoff < 0:
            raise InvalidInputError("retry settings must be >= 0")
        if self.max_in_flight < 1:
            raise InvalidInputError("max_in_flight must be >= 1")

    def bootstrap_guidance(self, progress: float) -> float:
        """Linearly decaying guidance strength over bootstrap progress
        in [0, 1]."""
        p = min(max(progress, 0.0), 1.0)
        return (self.bootstrap_guidance_start
                + (self.bootstrap_guidance_end
                   - self.bootstrap_guidance_start) * p)

    def upscale_request(self, source: Image, scale: int,
                        n_samples: int = 1) -> SynthesizerRequest:
        return SynthesizerRequest(source=source, mode="upscale", scale=scale,
                                  seed=self.seed, prompt=self.upscale_prompt,
                                  guidance=self.upscale_guidance,
                                  steps=self.upscale_steps,
                                  n_samples=n_samples)

    def regenerate_request(self, source: Image, progress: float = 0.0,
                           n_samples: int = 1) -> SynthesizerRequest:
        return SynthesizerRequest(source=source, mode="regenerate",
                                  seed=self.seed,
                                  prompt=self.bootstrap_prompt,
                                  guidance=self.bootstrap_guidance(progress),
                                  steps=self.bootstrap_steps,
                                  n_samples=n_samples)


class FixtureStore:
    """Directory of recorded responses keyed by request fingerprint."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def _path(self, body: dict) -> Path:
        return self.directory / f"{request_fingerprint(body)}.png"

    def save(self, body: dict, png: bytes) -> None:
        self._path(body).write_bytes(png)

    def load(self, body: dict) -> bytes | None:
        p = self._path(body)
        return p.read_bytes() if p.exists() else None


def _validated_image(png: bytes, req: SynthesizerRequest) -> Image:
    try:
        img = decode_png(png)
    except ParseError as exc:
        raise ProtocolError(f"response is not a valid PNG: {exc}") from exc
    if img.pixels.shape[:2] != req.expected_shape():
        raise ProtocolError(
            f"response size {img.pixels.shape[:2]} != expected "
            f"{req.expected_shape()}")
    return img


class RemoteDiffusionClient:
    """JSON-over-HTTP client for a diffusion synthesis service.

    Transport failures are retried with exponential backoff and finally
    raised as SynthesisUnavailableError; any non-200 status or malformed
    payload is a ProtocolError immediately (the service is up but not
    speaking the contract, so retrying cannot help). When a FixtureStore
    is attached, every successful response is recorded for offline replay.
    """

    def __init__(self, config: RemoteDiffusionConfig, session=None,
                 fixture_store: FixtureStore | None = None):
        self.config = config
        self._session = session if session is not None else requests.Session()
        self._store = fixture_store

    def synthesize(self, req: SynthesizerRequest) -> Image:
        body = req.wire_body()
        png = self._post(body)
        img = _validated_image(png, req)
        if self._store is not None:
            self._store.save(body, png)
        return img

    def _post(self, body: dict) -> bytes:
        url = self.config.endpoint.rstrip("/") + "/v1/synthesize"
        last_exc = None
        for attempt in range(self.config.max_retries + 1):
            if attempt and self.config.retry_backoff:
                time.sleep(self.config.retry_backoff * 2 ** (attempt - 1))
            try:
                resp = self._session.post(url, json=body,
                                          timeout=self.config.timeout)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code != 200:
                raise ProtocolError(
                    f"service returned HTTP {resp.status_code}")
            try:
                payload = resp.json()
                return base64.b64decode(payload["image_b64"], validate=True)
            except (ValueError, KeyError, TypeError) as exc:
                raise ProtocolError(f"malformed response body: {exc}") from exc
        raise SynthesisUnavailableError(
            f"transport failed after {self.config.max_retries + 1} attempts: "
            f"{last_exc}") from last_exc


class ReplayBackend:
    """Serves only recorded fixtures; a miss means unavailable."""

    def __init__(self, store: FixtureStore):
        self._store = store

    def synthesize(self, req: SynthesizerRequest) -> Image:
        png = self._store.load(req.wire_body())
        if png is None:
            raise SynthesisUnavailableError(
                "no recorded fixture for this request")
        return _validated_image(png, req)


def synthesize(req: SynthesizerRequest, backend) -> Image:
    """Run one synthesis request against any backend and validate the
    result size against the request."""
    out = backend.synthesize(req)
    if not isinstance(out, Image) or not out.quantized:
        raise ProtocolError("backend returned a non-quantized image")
    if out.pixels.shape[:2] != req.expected_shape():
        raise ProtocolError(
            f"backend returned size {out.pixels.shape[:2]}, expected "
            f"{req.expected_shape()}")
    return out


def synthesize_many(reqs, backend, max_in_flight: int = 4) -> list[Image]:
    """Run several requests, preserving order; concurrency helps only for
    remote backends but is harmless for pure ones."""
    reqs = list(reqs)
    if not reqs:
        return []
    if max_in_flight < 1:
        raise InvalidInputError("max_in_flight must be >= 1")
    if max_in_flight == 1 or len(reqs) == 1:
        return [synthesize(r, backend) for r in reqs]
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda r: synthesize(r, backend), reqs))


@dataclass(frozen=True)
class RegenerationSettings:
    """Knobs for regenerating a batch of renders."""

    seed: int = 22
    prompt: str = DEFAULT_BOOTSTRAP_PROMPT
    guidance: float = 0.06
    steps: int = 1
    n_samples: int = 1


def bootstrap_regenerate(renders, backend,
                         settings: RegenerationSettings = RegenerationSettings()
                         ) -> list[Image]:
    """Regenerate each render in place-preserving order; render i uses
    seed settings.seed + i so batches are deterministic but decorrelated."""
    renders = list(renders)
    if not renders:
        raise InvalidInputError("need at least one render")
    reqs = [SynthesizerRequest(source=img, mode="regenerate",
                               seed=settings.seed + i,
                               prompt=settings.prompt,
                               guidance=settings.guidance,
                               steps=settings.steps,
                               n_samples=settings.n_samples)
            for i, img in enumerate(renders)]
    return synthesize_many(reqs, backend)
