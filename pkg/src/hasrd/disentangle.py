"""Semantic/acoustic factorization of an encoder layer bank.

The semantic stream is the k-means code of one fixed encoder layer.  The
acoustic streams quantize what is left of a learned convex mix of all
layers after a linear map and removal of the semantic centroid:

    residual = (sum_n alpha_n H_n) @ W - centroid(H_{n_s})

and the decoder sees ``centroid + sum_m acoustic_term_m``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .quantize import ResidualVQ, RvqEncoding, kmeans_quantize, rvq_terms
from .validation import HASRDError, NotFittedError

DEFAULT_SEMANTIC_LAYER = 8


def mix_layers(bank: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Convex combination of the bank's layers with ``softmax(logits)`` weights."""
    if bank.shape[0] == 0:
        raise HASRDError("empty layer bank")
    if logits.shape != (bank.shape[0],):
        raise HASRDError(f"need {bank.shape[0]} mixing logits, got {tuple(logits.shape)}")
    alpha = torch.softmax(logits, dim=0).to(bank.dtype)
    return torch.tensordot(alpha, bank, dims=1)


def acoustic_residual(H: torch.Tensor, W: torch.Tensor, semantic_quantized: torch.Tensor) -> torch.Tensor:
    if H.shape[-1] != W.shape[0] or (H @ W).shape != semantic_quantized.shape:
        raise HASRDError(
            f"incompatible shapes H{tuple(H.shape)} W{tuple(W.shape)} Hs{tuple(semantic_quantized.shape)}"
        )
    return H @ W - semantic_quantized


def compose(semantic_quantized, acoustic_terms) -> torch.Tensor:
    """``semantic + (t_1 + t_2 + ...)`` with the acoustic sum taken left to right.

    ``semantic_quantized=None`` gives the acoustic-only sum.
    """
    acoustic_terms = list(acoustic_terms)
    for t in acoustic_terms:
        if semantic_quantized is not None and t.shape != semantic_quantized.shape:
            raise HASRDError("all composed terms must share one shape")
    if not acoustic_terms:
        if semantic_quantized is None:
            raise HASRDError("nothing to compose")
        return semantic_quantized
    acc = acoustic_terms[0]
    for t in acoustic_terms[1:]:
        acc = acc + t
    return acc if semantic_quantized is None else semantic_quantized + acc


@dataclass
class DisentangleOutput:
    codes: torch.Tensor  # (..., U, M), column 0 semantic
    latent: torch.Tensor
    semantic_quantized: torch.Tensor
    residual: torch.Tensor
    rvq: RvqEncoding


class Disentangler(nn.Module):
    """Trainable state for the codec stage: mixing logits, ``W`` and RVQ stages.

    The semantic codebook is a frozen buffer filled by :meth:`set_semantic_codebook`.
    """

    def __init__(
        self,
        num_layers: int,
        dim: int,
        semantic_layer: int = DEFAULT_SEMANTIC_LAYER,
        n_acoustic: int = 8,
        acoustic_codebook_size: int = 1024,
        code_dim: int = 8,
    ):
        super().__init__()
        if not 0 <= semantic_layer < num_layers:
            raise HASRDError(f"semantic layer {semantic_layer} outside bank of {num_layers} layers")
        if n_acoustic < 1:
            raise HASRDError("need at least one acoustic stage")
        self.semantic_layer = semantic_layer
        self.mix_logits = nn.Parameter(torch.zeros(num_layers))
        self.W = nn.Parameter(torch.eye(dim))
        self.register_buffer("semantic_codebook", None)
        self.rvq = ResidualVQ(dim, n_acoustic, acoustic_codebook_size, code_dim)

    @property
    def alpha(self) -> torch.Tensor:
        return torch.softmax(self.mix_logits, dim=0)

    @property
    def codebook_sizes(self) -> list:
        self._check_semantic()
        return [self.semantic_codebook.shape[0]] + [s.codebook_size for s in self.rvq.stages]

    def set_semantic_codebook(self, centroids) -> None:
        c = torch.as_tensor(np.asarray(centroids), dtype=self.W.dtype)
        if c.dim() != 2 or c.shape[1] != self.W.shape[0] or c.shape[0] < 2:
            raise HASRDError(f"semantic codebook must be (K>=2, {self.W.shape[0]}), got {tuple(c.shape)}")
        self.semantic_codebook = c.clone()

    def _check_semantic(self):
        if self.semantic_codebook is None:
            raise NotFittedError("semantic codebook is not trained")

    def semantic_branch(self, bank: torch.Tensor):
        self._check_semantic()
        res = kmeans_quantize(bank[self.semantic_layer].detach(), self.semantic_codebook)
        return res.codes, res.quantized

    def forward(self, bank: torch.Tensor, n_acoustic: int | None = None) -> DisentangleOutput:
        bank = bank.detach()
        codes_s, sem_q = self.semantic_branch(bank)
        H = mix_layers(bank, self.mix_logits)
        residual = acoustic_residual(H, self.W, sem_q)
        enc = self.rvq(residual, n_acoustic)
        latent = compose(sem_q, enc.terms)
        codes = torch.cat([codes_s[..., None], enc.codes], dim=-1)
        return DisentangleOutput(codes, latent, sem_q, residual, enc)

    def latent_from_codes(self, codes: torch.Tensor, n_codebooks: int | None = None) -> torch.Tensor:
        """Decoder input from a ``(..., U, M)`` code matrix.

        ``n_codebooks = k > 0`` keeps the semantic stream plus ``k - 1``
        acoustic streams; ``k < 0`` drops the semantic stream and keeps the
        first ``|k|`` acoustic streams.
        """
        self._check_semantic()
        M = 1 + len(self.rvq.stages)
        if codes.shape[-1] != M:
            raise HASRDError(f"expected {M} code streams, got {codes.shape[-1]}")
        k = M if n_codebooks is None else n_codebooks
        if k == 0 or abs(k) > M or k < -(M - 1):
            raise HASRDError(f"codebook selection {k} invalid for {M} streams")
        sem = codes[..., 0]
        K = self.semantic_codebook.shape[0]
        if sem.numel() and (int(sem.min()) < 0 or int(sem.max()) >= K):
            raise HASRDError(f"semantic code out of range (size {K})")
        if k > 0:
            terms = rvq_terms(codes[..., 1:k], self.rvq.stages) if k > 1 else []
            return compose(self.semantic_codebook[sem], terms)
        rvq_terms(codes[..., 1:], self.rvq.stages)  # range check on every stream
        return compose(None, rvq_terms(codes[..., 1 : 1 - k], self.rvq.stages))


def semantic_branch(bank: torch.Tensor, state: Disentangler):
    return state.semantic_branch(bank)


def dump_mix_weights(state: Disentangler) -> np.ndarray:
    with torch.no_grad():
        return state.alpha.double().numpy()
