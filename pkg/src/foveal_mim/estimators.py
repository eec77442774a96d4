"""scikit-learn compatible wrappers around the masking, pretraining and probing code."""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from foveal_mim.evaluation import LinearProbeClassifier, flatten_latents, reconstruction_error
from foveal_mim.imaging import Attention, MaskPlan, mask_batch
from foveal_mim.model import ArchitectureSpec, build_autoencoder, encode, load_checkpoint, reconstruct
from foveal_mim.training import PretrainConfig, best_record, pretrain
from foveal_mim.validation import check_images

__all__ = ["MaskingTransformer", "MaskedImageModel", "LinearProbeClassifier"]


class MaskingTransformer(TransformerMixin, BaseEstimator):
    """Stateless transformer applying a masking strategy to a batch of images.

    ``transform`` returns the masked images; the matching loss-weight maps of
    the last call are kept in ``weights_``. Sample ``i`` of a call uses a
    generator seeded with ``(random_state, i)``.
    """

    def __init__(self, strategy="masked_periphery", ratio=0.8, patch_size=8, blur_sigma=8.0,
                 attention=None, random_state=0):
        self.strategy = strategy
        self.ratio = ratio
        self.patch_size = patch_size
        self.blur_sigma = blur_sigma
        self.attention = attention
        self.random_state = random_state

    def _plan(self) -> MaskPlan:
        attention = self.attention
        if isinstance(attention, dict):
            attention = Attention(**attention)
        return MaskPlan(self.strategy, self.ratio, self.patch_size, None, self.blur_sigma, attention,
                        int(self.random_state))

    def fit(self, X, y=None):
        X = check_images(X)
        self._plan()
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X, confidence=None):
        X = check_images(X)
        seeds = [[int(self.random_state), i] for i in range(len(X))]
        out, self.weights_ = mask_batch(X, self._plan(), seeds, confidence)
        return out


class MaskedImageModel(TransformerMixin, BaseEstimator):
    """Masked-image-modeling autoencoder as a feature extractor.

    ``fit`` pretrains on unlabeled images (``N x 96 x 96 x 3``, uint8 or
    float in [0, 1]) and keeps the checkpoint with the lowest epoch-mean
    loss. ``transform`` returns flattened latent codes (``N x 18432`` for the
    default architecture), ready for a linear probe in a Pipeline.
    """

    def __init__(self, strategy="masked_periphery", ratio=0.8, patch_size=8, blur_sigma=8.0,
                 attention=None, learning_rate=1e-4, weight_decay=1e-8, batch_size=512, epochs=500,
                 crop=True, fixed_masks=False, foreground_weighting=False, checkpoint_every=10,
                 image_size=96, base_channels=32, blocks_per_stage=3, run_dir=None, random_state=0):
        self.strategy = strategy
        self.ratio = ratio
        self.patch_size = patch_size
        self.blur_sigma = blur_sigma
        self.attention = attention
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.crop = crop
        self.fixed_masks = fixed_masks
        self.foreground_weighting = foreground_weighting
        self.checkpoint_every = checkpoint_every
        self.image_size = image_size
        self.base_channels = base_channels
        self.blocks_per_stage = blocks_per_stage
        self.run_dir = run_dir
        self.random_state = random_state

    def _architecture(self) -> ArchitectureSpec:
        default = (self.image_size, self.base_channels, self.blocks_per_stage) == (96, 32, 3)
        return ArchitectureSpec(image_size=self.image_size, base_channels=self.base_channels,
                                blocks_per_stage=self.blocks_per_stage,
                                expected_latent=ArchitectureSpec().expected_latent if default else None)

    def pretrain_config(self) -> PretrainConfig:
        attention = Attention(**self.attention) if isinstance(self.attention, dict) else self.attention
        plan = MaskPlan(self.strategy, self.ratio, self.patch_size, None, self.blur_sigma, attention,
                        int(self.random_state))
        return PretrainConfig(
            mask=plan, learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            batch_size=self.batch_size, epochs=self.epochs, crop=self.crop, fixed_masks=self.fixed_masks,
            foreground_weighting=self.foreground_weighting, checkpoint_every=self.checkpoint_every,
            architecture=self._architecture(), seed=int(self.random_state),
        )

    def fit(self, X, y=None, confidence=None):
        X = check_images(X, shape=(self.image_size, self.image_size, 3))
        config = self.pretrain_config()
        run_dir = self.run_dir or tempfile.mkdtemp(prefix="mim_run_")
        result = pretrain(config, X, run_dir, confidences=confidence)
        best = best_record(result.checkpoints)
        self.model_, _ = load_checkpoint(best.path)
        self.loss_curve_ = list(result.losses)
        self.best_epoch_ = best.epoch
        self.run_dir_ = Path(result.run_dir)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @classmethod
    def from_checkpoint(cls, path, **params):
        est = cls(**params)
        est.model_, meta = load_checkpoint(path)
        est.best_epoch_ = meta.get("epoch")
        est.n_features_in_ = est.model_.spec.image_size ** 2 * est.model_.spec.in_channels
        return est

    @classmethod
    def untrained(cls, **params):
        """Estimator holding a randomly initialized autoencoder (a probing baseline)."""
        est = cls(**params)
        est.model_ = build_autoencoder(est._architecture(), seed=int(est.random_state))
        est.best_epoch_ = 0
        est.n_features_in_ = est.image_size ** 2 * 3
        return est

    def encode(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return encode(self.model_, X)

    def transform(self, X):
        return flatten_latents(self.encode(X))

    def reconstruct(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return reconstruct(self.model_, X)

    def score(self, X, y=None, confidence=None):
        """Negative masked reconstruction error under this estimator's mask plan."""
        check_is_fitted(self, "model_")
        err, _ = reconstruction_error(self.model_, X, self.pretrain_config().mask, confidences=confidence,
                                      foreground_only=confidence is not None)
        return -err
