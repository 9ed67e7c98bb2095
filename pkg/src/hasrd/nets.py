"""Encoder, masking, MLM head and waveform decoder.

The encoder runs on mel frames: an input convolution, two strided blocks of
three dilated residual units each (4x downsampling), then a stack of
attention blocks.  Its output is a layer bank ``(N + 1, B, U, D)`` whose
entry 0 is the convolutional output.  The decoder upsamples latent frames by
``8 * 8 * 4 * 2 = 512`` samples with transposed convolutions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .features import STACK_FACTOR
from .validation import HASRDError


def snake(x: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """``x + sin(a x)^2 / a``; ``a`` broadcasts against the channel axis of ``x``."""
    if bool((a <= 0).any()):
        raise HASRDError("snake frequency must be positive")
    return x + torch.sin(a * x).pow(2) / a


class Snake(nn.Module):
    """Snake with a learnable per-channel frequency, stored as its logarithm."""

    def __init__(self, channels: int):
        super().__init__()
        self.log_alpha = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return snake(x, self.log_alpha.exp()[:, None])


def depthwise_separable_conv1d(
    x: torch.Tensor,
    depthwise_kernels: torch.Tensor,
    pointwise_matrix: torch.Tensor,
    dilation: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Per-channel convolution followed by a 1x1 channel mix.

    ``depthwise_kernels`` has shape ``(C, k)`` and ``pointwise_matrix``
    ``(C_out, C)``.
    """
    if x.dim() != 3:
        raise HASRDError(f"expected (batch, channels, time), got {tuple(x.shape)}")
    c = x.shape[1]
    if depthwise_kernels.dim() != 2 or depthwise_kernels.shape[0] != c:
        raise HASRDError(f"depthwise kernels must be ({c}, k), got {tuple(depthwise_kernels.shape)}")
    if pointwise_matrix.dim() != 2 or pointwise_matrix.shape[1] != c:
        raise HASRDError(f"pointwise matrix must be (C_out, {c}), got {tuple(pointwise_matrix.shape)}")
    y = F.conv1d(x, depthwise_kernels[:, None, :], dilation=dilation, padding=padding, groups=c)
    return F.conv1d(y, pointwise_matrix[:, :, None])


class DepthwiseSeparableConv1d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, dilation: int = 1):
        super().__init__()
        self.depthwise = nn.Conv1d(
            in_channels, in_channels, kernel_size, dilation=dilation,
            padding=dilation * (kernel_size - 1) // 2, groups=in_channels, bias=False,
        )
        self.pointwise = nn.Conv1d(in_channels, out_channels, 1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


def separable_param_count(c_in: int, c_out: int, k: int) -> int:
    return c_in * k + c_in * c_out


class ResidualUnit(nn.Module):
    def __init__(self, channels: int, dilation: int, kernel_size: int = 7, separable: bool = True):
        super().__init__()
        if separable:
            conv = DepthwiseSeparableConv1d(channels, channels, kernel_size, dilation)
        else:
            conv = nn.Conv1d(channels, channels, kernel_size, dilation=dilation, padding=dilation * (kernel_size - 1) // 2)
        self.block = nn.Sequential(Snake(channels), conv, Snake(channels), nn.Conv1d(channels, channels, 1))

    def forward(self, x):
        return x + self.block(x)


@dataclass
class EncoderConfig:
    num_mels: int = 80
    latent_dim: int = 64
    num_cnn_blocks: int = 2
    kernel: int = 4
    stride: int = 2
    dilations: tuple = (1, 3, 9)
    residual_kernel: int = 7
    num_attention_layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    separable: bool = True

    def validate(self):
        if self.stride ** self.num_cnn_blocks != STACK_FACTOR:
            raise HASRDError(f"encoder must downsample by {STACK_FACTOR}")
        if tuple(self.dilations) != (1, 3, 9):
            raise HASRDError("residual units use dilations (1, 3, 9)")
        if self.latent_dim % self.heads:
            raise HASRDError("latent_dim must be divisible by heads")
        if self.latent_dim % 2 ** self.num_cnn_blocks:
            raise HASRDError(f"latent_dim must be divisible by {2 ** self.num_cnn_blocks}")
        return self


class EncoderBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, cfg: EncoderConfig):
        super().__init__()
        units = [ResidualUnit(c_in, d, cfg.residual_kernel, cfg.separable) for d in cfg.dilations]
        pad = (cfg.kernel - cfg.stride) // 2
        self.block = nn.Sequential(*units, Snake(c_in), nn.Conv1d(c_in, c_out, cfg.kernel, cfg.stride, padding=pad))

    def forward(self, x):
        return self.block(x)


class AttentionBlock(nn.Module):
    """Pre-norm self-attention, depthwise convolution module and feed-forward."""

    def __init__(self, dim: int, heads: int, ff_dim: int, conv_kernel: int = 7):
        super().__init__()
        self.attn_norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.conv_norm = nn.LayerNorm(dim)
        self.conv = DepthwiseSeparableConv1d(dim, dim, conv_kernel)
        self.ff_norm = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, ff_dim), nn.SiLU(), nn.Linear(ff_dim, dim))
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, x):
        h = self.attn_norm(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + F.silu(self.conv(self.conv_norm(x).transpose(1, 2))).transpose(1, 2)
        x = x + self.ff(self.ff_norm(x))
        return self.out_norm(x)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg = (cfg or EncoderConfig()).validate()
        widths = [cfg.latent_dim // 2 ** (cfg.num_cnn_blocks - i) for i in range(cfg.num_cnn_blocks + 1)]
        layers = [nn.Conv1d(cfg.num_mels, widths[0], 7, padding=3)]
        layers += [EncoderBlock(widths[i], widths[i + 1], cfg) for i in range(cfg.num_cnn_blocks)]
        layers += [Snake(widths[-1]), nn.Conv1d(widths[-1], cfg.latent_dim, 3, padding=1)]
        self.cnn = nn.Sequential(*layers)
        self.layers = nn.ModuleList(
            AttentionBlock(cfg.latent_dim, cfg.heads, cfg.ff_dim) for _ in range(cfg.num_attention_layers)
        )

    @property
    def num_layers(self) -> int:
        return len(self.layers) + 1

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Map ``(B, T, F)`` (or ``(T, F)``) features to a ``(N + 1, B, U, D)`` bank."""
        squeeze = features.dim() == 2
        if squeeze:
            features = features[None]
        if features.shape[1] < STACK_FACTOR:
            raise HASRDError(f"too short: {features.shape[1]} frames, encoder needs at least {STACK_FACTOR}")
        h = self.cnn(features.transpose(1, 2)).transpose(1, 2)
        bank = [h]
        for layer in self.layers:
            h = layer(h)
            bank.append(h)
        out = torch.stack(bank)
        return out[:, 0] if squeeze else out


def encoder_forward(features, encoder: Encoder) -> torch.Tensor:
    return encoder(torch.as_tensor(features))


@dataclass
class MaskSpec:
    mask_prob: float = 0.02
    span_frames: int = 8
    seed: int = 0
    noise_std: float = 0.1
    min_spans: int = 0

    def validate(self):
        if not 0.0 <= self.mask_prob < 1.0:
            raise HASRDError(f"mask_prob must be in [0, 1), got {self.mask_prob}")
        if self.span_frames < 1:
            raise HASRDError("span_frames must be >= 1")
        return self


def apply_mask(features, spec: MaskSpec, factor: int = STACK_FACTOR):
    """Replace random spans of label frames with Gaussian noise.

    Span starts are drawn per label frame (``factor`` feature frames each)
    with probability ``mask_prob``; each start masks ``span_frames`` label
    frames.  Returns the masked ``(T, F)`` features and the sorted masked
    label-frame indices.  With ``min_spans`` set, that many starts are forced
    when the draw yields fewer.
    """
    spec.validate()
    x = np.array(features, dtype=np.float32, copy=True)
    n_labels = x.shape[0] // factor
    rng = np.random.default_rng(spec.seed)
    starts = np.flatnonzero(rng.random(n_labels) < spec.mask_prob)
    if starts.size < spec.min_spans and n_labels > 0:
        extra = rng.choice(n_labels, size=min(spec.min_spans, n_labels), replace=False)
        starts = np.union1d(starts, extra)
    covered = np.zeros(n_labels, dtype=bool)
    for s in starts:
        covered[s : s + spec.span_frames] = True
    mask_set = np.flatnonzero(covered)
    frame_mask = np.repeat(covered, factor)
    noise = rng.standard_normal((int(frame_mask.sum()), x.shape[1])).astype(np.float32) * spec.noise_std
    x[: n_labels * factor][frame_mask] = noise
    return x, mask_set


class MLMHead(nn.Module):
    def __init__(self, dim: int, num_labels: int):
        super().__init__()
        self.proj = nn.Linear(dim, num_labels)

    def forward(self, contextual):
        return self.proj(contextual)


@dataclass
class DecoderConfig:
    latent_dim: int = 64
    channels: int = 64
    strides: tuple = (8, 8, 4, 2)
    residual_kernel: int = 7
    separable: bool = True

    @property
    def hop(self) -> int:
        return math.prod(self.strides)

    def validate(self):
        if self.hop != 512:
            raise HASRDError(f"decoder strides must multiply to 512, got {self.hop}")
        if any(s % 2 for s in self.strides):
            raise HASRDError("decoder strides must be even")
        if self.channels % 2 ** len(self.strides):
            raise HASRDError(f"decoder channels must be divisible by {2 ** len(self.strides)}")
        return self


class DecoderBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, cfg: DecoderConfig):
        super().__init__()
        self.block = nn.Sequential(
            Snake(c_in),
            nn.ConvTranspose1d(c_in, c_out, 2 * stride, stride, padding=stride // 2),
            *[ResidualUnit(c_out, d, cfg.residual_kernel, cfg.separable) for d in (1, 3, 9)],
        )

    def forward(self, x):
        return self.block(x)


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig | None = None):
        super().__init__()
        self.cfg = cfg = (cfg or DecoderConfig()).validate()
        # latent D -> decoder width; the two widths differ in general
        self.input_proj = nn.Linear(cfg.latent_dim, cfg.channels)
        widths = [cfg.channels // 2 ** i for i in range(len(cfg.strides) + 1)]
        layers = [nn.Conv1d(cfg.channels, cfg.channels, 7, padding=3)]
        layers += [DecoderBlock(widths[i], widths[i + 1], s, cfg) for i, s in enumerate(cfg.strides)]
        layers += [Snake(widths[-1]), nn.Conv1d(widths[-1], 1, 7, padding=3), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, latent: torch.Tensor) -> torch.Tensor:
        """``(B, U, D)`` or ``(U, D)`` -> ``(B, U * 512)`` or ``(U * 512,)``."""
        squeeze = latent.dim() == 2
        if squeeze:
            latent = latent[None]
        y = self.net(self.input_proj(latent).transpose(1, 2))[:, 0]
        return y[0] if squeeze else y
