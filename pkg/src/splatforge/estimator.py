"""Scene reconstruction wrapped in the estimator fit/predict convention."""

from __future__ import annotations

import numpy as np

from .metrics import psnr
from .rasterize import render
from .scene import InvalidInputError, Scene
from .training import TrainConfig, TrainResult, train


class GaussianSplatting:
    """Fits a Gaussian scene to posed images and renders novel views.

    Constructor arguments are stored verbatim and reported by get_params,
    so the object composes with grid searches and other tooling that
    follows the estimator convention. Attributes learned by fit carry a
    trailing underscore: scene_ (the reconstruction), log_ (metric rows),
    state_ (full optimizer state).
    """

    def __init__(self, config: TrainConfig | None = None, synthesizer=None,
                 out_dir=None):
        self.config = config
        self.synthesizer = synthesizer
        self.out_dir = out_dir

    def get_params(self, deep: bool = True) -> dict:
        return {"config": self.config, "synthesizer": self.synthesizer,
                "out_dir": self.out_dir}

    def set_params(self, **params) -> "GaussianSplatting":
        known = self.get_params()
        for key, value in params.items():
            if key not in known:
                raise InvalidInputError(
                    f"unknown parameter {key!r} for GaussianSplatting")
            setattr(self, key, value)
        return self

    def _resolved_config(self) -> TrainConfig:
        return self.config if self.config is not None else TrainConfig()

    def fit(self, cameras, images, init_scene: Scene | None = None,
            resume_from=None) -> "GaussianSplatting":
        """Optimize a scene for the (camera, image) pairs; returns self."""
        cameras = list(cameras)
        images = list(images)
        if len(cameras) != len(images):
            raise InvalidInputError(
                f"{len(cameras)} cameras but {len(images)} images")
        result: TrainResult = train(
            self._resolved_config(), list(zip(cameras, images)),
            init_scene=init_scene, out_dir=self.out_dir,
            synthesizer=self.synthesizer, resume_from=resume_from)
        self.scene_ = result.scene
        self.log_ = result.log
        self.state_ = result.state
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "scene_"):
            raise InvalidInputError("estimator is not fitted; call fit first")

    def predict(self, cameras) -> list[np.ndarray]:
        """Render the fitted scene from each camera (float images in [0,1])."""
        self._check_fitted()
        f = self._resolved_config().filter
        return [render(self.scene_, cam, f).image for cam in cameras]

    def score(self, cameras, images) -> float:
        """Mean PSNR of the fitted scene's renders against `images`."""
        images = list(images)
        renders = self.predict(cameras)
        if len(renders) != len(images):
            raise InvalidInputError(
                f"{len(renders)} cameras but {len(images)} images")
        if not renders:
            raise InvalidInputError("need at least one view to score")
        return float(np.mean([psnr(r, img) for r, img in zip(renders, images)]))
