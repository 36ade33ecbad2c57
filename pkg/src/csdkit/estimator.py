"""scikit-learn style facade over the full pipeline.

X is a list of Segments (labels travel inside them, so ``y`` is
optional and ignored when given); predictions come back as per-frame
class arrays. This exists for interoperability — grid searches,
cross-validation wrappers, quick scoring — while the native API stays
in the dedicated modules.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .backbones import ToyAudioBackbone, ToyVisualBackbone, audio_token_count
from .losses import LossConfig
from .model import CsdModel, FusionConfig, TokenGeometry
from .training import TrainConfig, middle_frame_accuracy, train
from .types import Segment, ValidationError


class CsdEstimator(BaseEstimator):
    """Concurrent-speaker detector with a fit/predict surface.

    Parameters mirror the native configs one-to-one; get_params /
    set_params come from BaseEstimator, so clone() and grid search work.
    """

    def __init__(
        self,
        embed_dim: int = 512,
        num_blocks: int = 4,
        num_heads: int = 8,
        use_cls: bool = True,
        fusion: str = "early",
        window_frames: int = 7,
        epochs: int = 3,
        batch_size: int = 64,
        lr_audio: float = 1e-7,
        lr_visual: float = 1e-6,
        lr_head: float = 1e-4,
        weight_decay: float = 1e-9,
        label_smoothing: float = 0.1,
        balance: bool = False,
        augment_multiplier: int = 0,
        seed: int = 0,
    ):
        self.embed_dim = embed_dim
        self.num_blocks = num_blocks
        self.num_heads = num_heads
        self.use_cls = use_cls
        self.fusion = fusion
        self.window_frames = window_frames
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr_audio = lr_audio
        self.lr_visual = lr_visual
        self.lr_head = lr_head
        self.weight_decay = weight_decay
        self.label_smoothing = label_smoothing
        self.balance = balance
        self.augment_multiplier = augment_multiplier
        self.seed = seed

    def _configs(self) -> tuple[FusionConfig, TrainConfig, LossConfig]:
        fusion = FusionConfig(
            embed_dim=self.embed_dim,
            num_blocks=self.num_blocks,
            num_heads=self.num_heads,
            use_cls=self.use_cls,
            fusion=self.fusion,
            window_frames=self.window_frames,
        )
        train_cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr_audio=self.lr_audio,
            lr_visual=self.lr_visual,
            lr_head=self.lr_head,
            weight_decay=self.weight_decay,
            seed=self.seed,
            balance=self.balance,
            augment_multiplier=self.augment_multiplier,
            use_audio_augment=self.augment_multiplier > 0,
            use_visual_augment=self.augment_multiplier > 0,
        )
        loss_cfg = LossConfig(label_smoothing=self.label_smoothing)
        return fusion, train_cfg, loss_cfg

    def fit(self, X: Sequence[Segment], y=None) -> "CsdEstimator":
        if not X:
            raise ValidationError("fit requires at least one segment")
        fusion_cfg, train_cfg, loss_cfg = self._configs()
        first = X[0]
        geometry = TokenGeometry(
            audio_tokens=first.audio.samples.shape[0]
            * audio_token_count(first.audio.samples.shape[1]),
            visual_tokens=first.faces.streams.shape[0],
        )
        model = CsdModel(
            fusion_cfg,
            audio_backbone=ToyAudioBackbone(),
            visual_backbone=ToyVisualBackbone(self.window_frames),
            geometry=None if self.use_cls else geometry,
        )
        result = train(model, list(X), train_cfg, loss_config=loss_cfg)
        self.model_ = result.model
        self.history_ = result.history
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise ValidationError("estimator is not fitted; call fit first")

    def predict_proba(self, X: Sequence[Segment]) -> np.ndarray:
        """(n_segments, window_frames, 3) class posteriors."""
        self._check_fitted()
        self.model_.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(X), self.batch_size):
                logits = self.model_.forward_segments(list(X[i : i + self.batch_size]))
                out.append(torch.softmax(logits, dim=-1).double().cpu().numpy())
        return np.concatenate(out)

    def predict(self, X: Sequence[Segment]) -> np.ndarray:
        """(n_segments, window_frames) hard class labels."""
        return self.predict_proba(X).argmax(axis=-1)

    def score(self, X: Sequence[Segment], y=None) -> float:
        """Middle-frame accuracy over the given segments."""
        self._check_fitted()
        return middle_frame_accuracy(self.model_, list(X), self.batch_size)
