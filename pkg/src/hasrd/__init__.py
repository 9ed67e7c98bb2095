"""Hierarchical speech tokenizer with separate semantic and acoustic token streams."""

from .checkpoint import Checkpoint, CheckpointError
from .codec import HASRDCodec
from .codec_io import TokenFormatError, TokenStream, read_tokens, read_wav, write_tokens, write_wav
from .disentangle import Disentangler, acoustic_residual, compose, dump_mix_weights, mix_layers, semantic_branch
from .features import FbankTransformer, compute_fbank, sentence_normalize, stack_frames, utterance_features
from .losses import mlm_loss, multiscale_mel_loss, stft_distance
from .nets import Decoder, DecoderConfig, Encoder, EncoderConfig, MaskSpec, Snake, apply_mask, snake
from .quantize import (
    KMeansCodebook,
    RandomProjectionQuantizer,
    ResidualVectorQuantizer,
    ResidualVQ,
    kmeans_fit,
    rpq_init,
    rpq_labels,
)
from .train import HASRDModel, TrainConfig, evaluate, pretrain_mlm, train_codec
from .validation import HASRDError, NotFittedError

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CheckpointError", "Decoder", "DecoderConfig", "Disentangler", "Encoder", "EncoderConfig",
    "FbankTransformer", "HASRDCodec", "HASRDError", "HASRDModel", "KMeansCodebook", "MaskSpec",
    "NotFittedError", "RandomProjectionQuantizer", "ResidualVQ", "ResidualVectorQuantizer", "Snake",
    "TokenFormatError", "TokenStream", "TrainConfig", "acoustic_residual", "apply_mask", "compose", "compute_fbank",
    "dump_mix_weights", "evaluate", "kmeans_fit", "mix_layers", "mlm_loss", "multiscale_mel_loss",
    "pretrain_mlm", "read_tokens", "read_wav", "rpq_init", "rpq_labels", "semantic_branch",
    "sentence_normalize", "snake", "stack_frames", "stft_distance", "train_codec", "utterance_features",
    "write_tokens", "write_wav",
]
