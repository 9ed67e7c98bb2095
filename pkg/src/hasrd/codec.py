"""End-to-end estimator wrapping both training stages."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .checkpoint import Checkpoint
from .disentangle import dump_mix_weights
from .train import HASRDModel, TrainConfig, evaluate, pretrain_mlm, train_codec
from .validation import check_is_fitted


class HASRDCodec(TransformerMixin, BaseEstimator):
    """Speech tokenizer with one semantic and ``n_acoustic`` acoustic streams.

    ``fit`` runs masked-label pretraining, fits the semantic k-means codebook
    and trains the codec stage on a list of 16 kHz waveforms (or a WAV
    directory).  ``transform`` returns one :class:`TokenStream` per
    waveform; ``inverse_transform`` decodes them back to audio.

    Parameters
    ----------
    n_codebooks : int or None
        Streams used by ``inverse_transform``: ``k > 0`` keeps the semantic
        stream plus ``k - 1`` acoustic streams, ``k < 0`` keeps only ``|k|``
        acoustic streams, ``None`` keeps all.
    """

    def __init__(
        self,
        mlm_steps: int = 500,
        codec_steps: int = 2000,
        batch_size: int = 4,
        mlm_learning_rate: float | None = None,
        codec_learning_rate: float | None = None,
        latent_dim: int = 64,
        num_attention_layers: int = 2,
        decoder_channels: int = 64,
        semantic_layer: int | None = None,
        n_acoustic: int = 8,
        semantic_codebook_size: int = 1024,
        acoustic_codebook_size: int = 1024,
        kmeans_fraction: float = 0.1,
        segment_seconds: float = 2.0,
        n_codebooks: int | None = None,
        seed: int = 0,
    ):
        self.mlm_steps = mlm_steps
        self.codec_steps = codec_steps
        self.batch_size = batch_size
        self.mlm_learning_rate = mlm_learning_rate
        self.codec_learning_rate = codec_learning_rate
        self.latent_dim = latent_dim
        self.num_attention_layers = num_attention_layers
        self.decoder_channels = decoder_channels
        self.semantic_layer = semantic_layer
        self.n_acoustic = n_acoustic
        self.semantic_codebook_size = semantic_codebook_size
        self.acoustic_codebook_size = acoustic_codebook_size
        self.kmeans_fraction = kmeans_fraction
        self.segment_seconds = segment_seconds
        self.n_codebooks = n_codebooks
        self.seed = seed

    def _config(self, stage: str) -> TrainConfig:
        return TrainConfig(
            stage=stage,
            steps=self.mlm_steps if stage == "mlm" else self.codec_steps,
            batch_size=self.batch_size,
            learning_rate=self.mlm_learning_rate if stage == "mlm" else self.codec_learning_rate,
            seed=self.seed,
            segment_seconds=self.segment_seconds,
            latent_dim=self.latent_dim,
            num_attention_layers=self.num_attention_layers,
            decoder_channels=self.decoder_channels,
            semantic_layer=self.semantic_layer,
            n_acoustic=self.n_acoustic,
            semantic_codebook_size=self.semantic_codebook_size,
            acoustic_codebook_size=self.acoustic_codebook_size,
            kmeans_fraction=self.kmeans_fraction,
        )

    def fit(self, X, y=None):
        self.encoder_checkpoint_ = pretrain_mlm(X, self._config("mlm"))
        self.checkpoint_ = train_codec(X, self.encoder_checkpoint_, self._config("codec"))
        self.model_ = HASRDModel.from_checkpoint(self.checkpoint_)
        return self

    @classmethod
    def from_checkpoint(cls, ckpt, **params) -> "HASRDCodec":
        ck = ckpt if isinstance(ckpt, Checkpoint) else Checkpoint.load(ckpt)
        est = cls(**params)
        est.checkpoint_ = ck
        est.model_ = HASRDModel.from_checkpoint(ck)
        return est

    @property
    def mix_weights_(self) -> np.ndarray:
        check_is_fitted(self, "model_")
        return dump_mix_weights(self.model_.disentangler)

    @property
    def bitrate_kbps_(self) -> float:
        from .train import bitrate_kbps

        check_is_fitted(self, "model_")
        return bitrate_kbps(self.model_.codebook_sizes)

    def transform(self, X) -> list:
        check_is_fitted(self, "model_")
        return [self.model_.encode(x) for x in X]

    def inverse_transform(self, tokens) -> list:
        check_is_fitted(self, "model_")
        return [self.model_.decode(t, self.n_codebooks) for t in tokens]

    def score(self, X, y=None) -> float:
        """Negative mean multi-scale mel distance of the reconstructions."""
        check_is_fitted(self, "model_")
        return -evaluate(X, self.model_, self.n_codebooks)["mel_distance"]
