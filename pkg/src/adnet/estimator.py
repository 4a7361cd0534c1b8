"""scikit-learn style wrapper: fit on scenes, predict HDR images."""
from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import PreprocessConfig, SceneSample, from_network_output, to_network_input
from .inference import tiled_infer, tta_infer
from .metrics import LossConfig, psnr
from .model import ADNet, ModelConfig
from .training import TrainConfig, train_loop
from .validation import check_scenes, check_tile


class ADNetEstimator(BaseEstimator):
    """Trains an ADNet on a list of :class:`SceneSample` and predicts HDR images.

    ``predict`` returns one H×W×3 array per scene. ``score`` is the mean
    PSNR-μ against the scenes' ground truth.
    """

    def __init__(
        self,
        variant: str = "full",
        base_channels: int = 64,
        drdb_count: int = 3,
        drdb_growth: int = 32,
        pyramid_levels: int = 3,
        lr: float = 1e-4,
        epochs: int = 200,
        milestone: int = 100,
        batch_size: int = 16,
        patch_size: int = 256,
        patch_stride: int = 128,
        max_steps: Optional[int] = None,
        gamma_disturbance: float = 0.3,
        mu: float = 5000.0,
        tta: bool = False,
        tile: Optional[Tuple[int, int]] = None,
        overlap: int = 0,
        seed: int = 0,
    ):
        self.variant = variant
        self.base_channels = base_channels
        self.drdb_count = drdb_count
        self.drdb_growth = drdb_growth
        self.pyramid_levels = pyramid_levels
        self.lr = lr
        self.epochs = epochs
        self.milestone = milestone
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.patch_stride = patch_stride
        self.max_steps = max_steps
        self.gamma_disturbance = gamma_disturbance
        self.mu = mu
        self.tta = tta
        self.tile = tile
        self.overlap = overlap
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.variant,
            base_channels=self.base_channels,
            drdb_count=self.drdb_count,
            drdb_growth=self.drdb_growth,
            pyramid_levels=self.pyramid_levels,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            epochs=self.epochs,
            milestone=self.milestone,
            batch_size=self.batch_size,
            patch_size=self.patch_size,
            patch_stride=self.patch_stride,
            max_steps=self.max_steps,
            seed=self.seed,
            preprocess=PreprocessConfig(disturb_probability=self.gamma_disturbance, seed=self.seed),
            loss=LossConfig(mu=self.mu),
        )

    def fit(self, X, y=None):
        scenes = check_scenes(X, require_gt=True)
        cfg = self._train_config()
        result = train_loop(ADNet(self._model_config(), seed=self.seed), scenes, cfg)
        self.model_ = result.model
        self.train_config_ = cfg
        self.log_ = result.log
        self.n_steps_ = result.step
        return self

    def _predict_one(self, scene: SceneSample) -> np.ndarray:
        model = self.model_
        x = to_network_input(scene, self.train_config_.preprocess.gamma_default).astype(model.dtype)
        predict = model.predict
        if self.tile is not None:
            check_tile(self.tile, self.overlap, model.config.size_multiple)

            def predict(z, base=model.predict):
                return tiled_infer(base, z, self.tile[0], self.tile[1], self.overlap, model.config.size_multiple)

        out = tta_infer(predict, x) if self.tta else predict(x)
        return from_network_output(out)

    def predict(self, X) -> List[np.ndarray]:
        check_is_fitted(self, "model_")
        return [self._predict_one(s) for s in check_scenes(X)]

    def score(self, X, y=None) -> float:
        scenes = check_scenes(X, require_gt=True)
        preds = self.predict(scenes)
        loss_cfg = self.train_config_.loss
        return float(np.mean([psnr(p, s.gt, "mu", loss_cfg) for p, s in zip(preds, scenes)]))
