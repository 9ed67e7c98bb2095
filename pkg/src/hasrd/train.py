"""Two-stage training, tokenization and evaluation.

Stage 1 (``pretrain_mlm``) trains the encoder to predict frozen
random-projection labels at masked frames.  Stage 2 (``train_codec``)
freezes it, fits the semantic k-means codebook, and trains the mixing
weights, ``W``, the acoustic RVQ stages and the decoder on multi-scale mel
reconstruction plus VQ losses.
"""

from __future__ import annotations

import ast
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint, CheckpointError, module_checksum
from .codec_io import HOP_SAMPLES, TokenStream, read_wav
from .disentangle import (
    DEFAULT_SEMANTIC_LAYER,
    Disentangler,
    acoustic_residual,
    compose,
    dump_mix_weights,
    mix_layers,
)
from .features import STACK_FACTOR, stack_frames, utterance_features
from .losses import multiscale_mel_loss, mlm_loss, stage2_total, stft_distance
from .nets import Decoder, DecoderConfig, Encoder, EncoderConfig, MaskSpec, MLMHead, apply_mask
from .quantize import kmeans_fit, rpq_init, rpq_labels
from .validation import SAMPLE_RATE, HASRDError, NotFittedError, check_waveform

logger = logging.getLogger(__name__)

FRAME_RATE = SAMPLE_RATE / HOP_SAMPLES  # 31.25 Hz


@dataclass
class TrainConfig:
    stage: str = "mlm"
    steps: int = 500
    batch_size: int = 4
    learning_rate: float | None = None  # None: 8e-4 for mlm, 1e-4 for codec
    weight_decay: float = 0.01
    warmup_steps: int = 50
    lr_gamma: float = 0.999996
    grad_clip: float = 1.0
    seed: int = 0
    segment_seconds: float = 2.0
    log_every: int = 10
    # masking / labels
    mask_prob: float = 0.02
    mask_span: int = 8
    mask_noise_std: float = 0.1
    rpq_code_dim: int = 16
    rpq_codebook_size: int = 8192
    # architecture
    latent_dim: int = 64
    num_attention_layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    decoder_channels: int = 64
    semantic_layer: int | None = None  # None: min(8, num_attention_layers)
    n_acoustic: int = 8
    acoustic_codebook_size: int = 1024
    code_dim: int = 8
    semantic_codebook_size: int = 1024
    kmeans_fraction: float = 0.1
    kmeans_max_iters: int = 100
    dead_code_threshold: int = 100
    quantizer_dropout: float = 0.0
    w_mel: float = 15.0
    w_commit: float = 0.25
    w_cb: float = 1.0

    def __post_init__(self):
        if self.stage not in ("mlm", "codec"):
            raise HASRDError(f"stage must be 'mlm' or 'codec', got {self.stage!r}")
        if self.steps < 1:
            raise HASRDError("steps must be >= 1")
        if self.batch_size < 1:
            raise HASRDError("batch_size must be >= 1")

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 8e-4 if self.stage == "mlm" else 1e-4

    @property
    def segment_frames(self) -> int:
        return max(1, int(self.segment_seconds * SAMPLE_RATE) // HOP_SAMPLES)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            latent_dim=self.latent_dim, num_attention_layers=self.num_attention_layers,
            heads=self.heads, ff_dim=self.ff_dim,
        )

    def resolved_semantic_layer(self, num_attention_layers: int) -> int:
        if self.semantic_layer is not None:
            return self.semantic_layer
        return min(DEFAULT_SEMANTIC_LAYER, num_attention_layers)

    def to_config(self) -> dict:
        return {f"train.{k}": repr(v) for k, v in asdict(self).items()}

    @classmethod
    def from_config(cls, config: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        kw = {k[6:]: ast.literal_eval(v) for k, v in config.items() if k.startswith("train.") and k[6:] in names}
        return cls(**kw)


def _arch_config(prefix: str, obj) -> dict:
    return {f"arch.{prefix}.{k}": repr(v) for k, v in asdict(obj).items()}


def _read_arch(config: dict, prefix: str, cls):
    p = f"arch.{prefix}."
    return cls(**{k[len(p):]: ast.literal_eval(v) for k, v in config.items() if k.startswith(p)})


# ---------------------------------------------------------------------------
# corpus


def _num_workers() -> int:
    try:
        return max(1, int(os.environ.get("HASRD_NUM_WORKERS", "1")))
    except ValueError:
        raise HASRDError("HASRD_NUM_WORKERS must be an integer") from None


def parallel_map(fn, items) -> list:
    """Ordered map, parallel up to ``HASRD_NUM_WORKERS`` threads."""
    n = _num_workers()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as ex:
        return list(ex.map(fn, items))


def load_corpus(corpus) -> list:
    """A directory of ``.wav`` files (sorted by name) or a sequence of waveforms."""
    if isinstance(corpus, (str, Path)):
        d = Path(corpus)
        if not d.is_dir():
            raise HASRDError(f"corpus directory not found: {d}")
        paths = sorted(d.glob("*.wav"))
        wavs = parallel_map(read_wav, paths)
    else:
        wavs = [check_waveform(w) for w in corpus]
    if not wavs:
        raise HASRDError("empty corpus")
    return wavs


def _crop(wav: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    if len(wav) <= n:
        return np.concatenate([wav, np.zeros(n - len(wav), dtype=np.float32)])
    start = int(rng.integers(len(wav) - n + 1))
    return wav[start : start + n]


def _log(log, line: str):
    logger.info(line)
    if log is not None:
        log(line)


# ---------------------------------------------------------------------------
# model container


class HASRDModel(nn.Module):
    """Encoder plus (optionally) the stage-2 disentangler and decoder."""

    def __init__(self, encoder: Encoder, disentangler: Disentangler | None = None, decoder: Decoder | None = None):
        super().__init__()
        self.encoder = encoder
        self.disentangler = disentangler
        self.decoder = decoder

    @property
    def trained(self) -> bool:
        return (
            self.disentangler is not None
            and self.decoder is not None
            and self.disentangler.semantic_codebook is not None
        )

    def _check_trained(self):
        if not self.trained:
            raise NotFittedError("model has no trained codec (run stage-2 training first)")

    @property
    def codebook_sizes(self) -> list:
        self._check_trained()
        return self.disentangler.codebook_sizes

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def layer_bank(self, wav) -> torch.Tensor:
        x = check_waveform(wav)
        feats = utterance_features(x)
        if feats.shape[0] < STACK_FACTOR:
            raise HASRDError(f"too short: {len(x)} samples gives no latent frame")
        with torch.no_grad():
            return self.encoder(torch.from_numpy(feats))

    def analyze(self, wav):
        """Full forward pass for one utterance; returns the disentangler output."""
        self._check_trained()
        bank = self.layer_bank(wav)
        with torch.no_grad():
            return self.disentangler(bank)

    def encode(self, wav) -> TokenStream:
        out = self.analyze(wav)
        return TokenStream(out.codes.numpy().astype(np.uint16), self.codebook_sizes)

    def decode(self, tokens: TokenStream, n_codebooks: int | None = None) -> np.ndarray:
        self._check_trained()
        if list(tokens.codebook_sizes) != self.codebook_sizes:
            raise HASRDError(
                f"token codebook sizes {list(tokens.codebook_sizes)} do not match checkpoint {self.codebook_sizes}"
            )
        if tokens.num_frames == 0:
            return np.zeros(0, dtype=np.float32)
        codes = torch.from_numpy(tokens.codes.astype(np.int64))
        with torch.no_grad():
            latent = self.disentangler.latent_from_codes(codes, n_codebooks)
            return self.decoder(latent).numpy()

    def reconstruct(self, wav, n_codebooks: int | None = None) -> np.ndarray:
        return self.decode(self.encode(wav), n_codebooks)

    # -- checkpoints -------------------------------------------------------
    def to_checkpoint(self, config: dict | None = None) -> Checkpoint:
        cfg = {**(config or {}), **_arch_config("encoder", self.encoder.cfg)}
        if not self.trained:
            ck = Checkpoint("mlm", cfg)
            ck.add_module("encoder", self.encoder)
            return ck
        dis = self.disentangler
        first = dis.rvq.stages[0]
        cfg.update(_arch_config("decoder", self.decoder.cfg))
        cfg.update({
            "arch.disentangle.semantic_layer": repr(dis.semantic_layer),
            "arch.disentangle.n_acoustic": repr(len(dis.rvq.stages)),
            "arch.disentangle.acoustic_codebook_size": repr(first.codebook_size),
            "arch.disentangle.code_dim": repr(first.in_proj.out_features),
        })
        ck = Checkpoint("codec", cfg)
        ck.add_module("encoder", self.encoder)
        ck.add_module("disentangle", dis)
        ck.add_module("decoder", self.decoder)
        return ck

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint) -> "HASRDModel":
        if isinstance(ck, (str, Path)):
            ck = Checkpoint.load(ck)
        if not ck.has("encoder"):
            raise CheckpointError(f"{ck.stage} checkpoint carries no encoder")
        encoder = Encoder(_read_arch(ck.config, "encoder", EncoderConfig))
        ck.load_module("encoder", encoder)
        encoder.eval()
        if ck.stage != "codec":
            return cls(encoder)
        kw = {k.split(".")[-1]: ast.literal_eval(v) for k, v in ck.config.items() if k.startswith("arch.disentangle.")}
        dis = Disentangler(encoder.num_layers, encoder.cfg.latent_dim, **kw)
        dis.set_semantic_codebook(ck.tensors["disentangle.semantic_codebook"])
        ck.load_module("disentangle", dis)
        decoder = Decoder(_read_arch(ck.config, "decoder", DecoderConfig))
        ck.load_module("decoder", decoder)
        return cls(encoder, dis.eval(), decoder.eval())


def load_model(path_or_ckpt) -> HASRDModel:
    return HASRDModel.from_checkpoint(path_or_ckpt)


def encode_utterance(wav, model: HASRDModel) -> TokenStream:
    return model.encode(wav)


def decode_tokens(tokens: TokenStream, model: HASRDModel, n_codebooks: int | None = None) -> np.ndarray:
    return model.decode(tokens, n_codebooks)


def model_mix_weights(model: HASRDModel) -> np.ndarray:
    model._check_trained()
    return dump_mix_weights(model.disentangler)


# ---------------------------------------------------------------------------
# stage 1


def _clip_and_step(params, opt, clip):
    if clip:
        torch.nn.utils.clip_grad_norm_(params, clip)
    opt.step()


def pretrain_mlm(corpus, cfg: TrainConfig | None = None, log=None) -> Checkpoint:
    """Masked-label pretraining of the encoder against frozen RPQ labels."""
    cfg = cfg or TrainConfig(stage="mlm")
    wavs = load_corpus(corpus)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    encoder = Encoder(cfg.encoder_config())
    head = MLMHead(cfg.latent_dim, cfg.rpq_codebook_size)
    rpq = rpq_init(cfg.seed, STACK_FACTOR * encoder.cfg.num_mels, cfg.rpq_code_dim, cfg.rpq_codebook_size)

    feats = parallel_map(utterance_features, wavs)
    labels = [rpq_labels(rpq, stack_frames(f)) for f in feats]

    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=(0.9, 0.98), weight_decay=cfg.weight_decay)
    warm = max(1, cfg.warmup_steps)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min((s + 1) / warm, math.sqrt(warm / (s + 1))))

    history = []
    encoder.train()
    for step in range(cfg.steps):
        idx = rng.choice(len(wavs), size=cfg.batch_size, replace=len(wavs) < cfg.batch_size)
        L = min(cfg.segment_frames, *(len(labels[i]) for i in idx))
        xs, ys, ms = [], [], []
        for i in idx:
            o = int(rng.integers(len(labels[i]) - L + 1))
            crop = feats[i][STACK_FACTOR * o : STACK_FACTOR * (o + L)]
            spec = MaskSpec(cfg.mask_prob, cfg.mask_span, int(rng.integers(2**63)), cfg.mask_noise_std, min_spans=1)
            masked, mask_set = apply_mask(crop, spec)
            m = np.zeros(L, dtype=bool)
            m[mask_set] = True
            xs.append(masked)
            ys.append(labels[i][o : o + L])
            ms.append(m)
        bank = encoder(torch.from_numpy(np.stack(xs)))
        logits = head(bank[-1])
        loss = mlm_loss(logits, torch.from_numpy(np.stack(ys)), torch.from_numpy(np.stack(ms)))
        if not torch.isfinite(loss):
            raise HASRDError(f"non-finite mlm loss at step {step}")
        opt.zero_grad()
        loss.backward()
        _clip_and_step(params, opt, cfg.grad_clip)
        sched.step()
        history.append(loss.item())
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            _log(log, f"step {step + 1} total {history[-1]:.6f} mlm {history[-1]:.6f}")

    encoder.eval()
    model = HASRDModel(encoder)
    config = {**cfg.to_config(), "step": str(cfg.steps), "rpq.seed": str(cfg.seed),
              "rpq.code_dim": str(cfg.rpq_code_dim), "rpq.codebook_size": str(cfg.rpq_codebook_size)}
    ck = model.to_checkpoint(config)
    ck.add_module("mlm_head", head)
    ck.tensors["history.mlm"] = np.asarray(history, dtype=np.float32)
    return ck


# ---------------------------------------------------------------------------
# semantic codebook


def _encoder_of(encoder_ckpt) -> Encoder:
    if isinstance(encoder_ckpt, Encoder):
        return encoder_ckpt
    if encoder_ckpt is None:
        raise HASRDError("missing encoder checkpoint")
    return HASRDModel.from_checkpoint(encoder_ckpt).encoder


def fit_semantic_codebook(
    corpus, encoder_ckpt, K: int = 1024, fraction: float = 0.1, seed: int = 0,
    semantic_layer: int | None = None, max_iters: int = 100,
):
    """k-means over semantic-layer frames of a random ``fraction`` of utterances."""
    wavs = load_corpus(corpus)
    encoder = _encoder_of(encoder_ckpt).eval()
    n_layers = len(encoder.layers)
    layer = min(DEFAULT_SEMANTIC_LAYER, n_layers) if semantic_layer is None else semantic_layer
    if not 0 <= layer <= n_layers:
        raise HASRDError(f"semantic layer {layer} outside bank of {n_layers + 1} layers")
    rng = np.random.default_rng(seed)
    n = max(1, int(round(fraction * len(wavs))))
    chosen = sorted(rng.permutation(len(wavs))[:n])
    frames = []
    with torch.no_grad():
        for i in chosen:
            frames.append(encoder(torch.from_numpy(utterance_features(wavs[i])))[layer].numpy())
    frames = np.concatenate(frames).astype(np.float64)
    n_distinct = np.unique(frames, axis=0).shape[0]
    if n_distinct < K:
        raise HASRDError(f"insufficient frames for k-means: {n_distinct} distinct < K={K}")
    cb = kmeans_fit(frames, K, max_iters, seed)
    cb.semantic_layer_ = layer
    return cb


def codebook_checkpoint(cb, semantic_layer: int) -> Checkpoint:
    return Checkpoint(
        "kmeans",
        {"semantic_layer": str(semantic_layer), "inertia": repr(cb.inertia_), "n_iter": str(cb.n_iter_)},
        {"semantic.codebook": cb.cluster_centers_},
    )


# ---------------------------------------------------------------------------
# stage 2


def train_codec(corpus, encoder_ckpt, cfg: TrainConfig | None = None, semantic_codebook=None, log=None) -> Checkpoint:
    """Frozen-encoder codec training; returns a ``codec`` checkpoint.

    ``semantic_codebook`` is a fitted :class:`KMeansCodebook`, a ``(K, D)``
    array, or ``None`` to fit one here.
    """
    cfg = cfg or TrainConfig(stage="codec")
    if encoder_ckpt is None:
        raise HASRDError("missing encoder checkpoint")
    wavs = load_corpus(corpus)
    encoder = _encoder_of(encoder_ckpt).eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    checksum = module_checksum(encoder)

    n_attn = len(encoder.layers)
    layer = cfg.resolved_semantic_layer(n_attn)
    if semantic_codebook is None:
        semantic_codebook = fit_semantic_codebook(
            wavs, encoder, cfg.semantic_codebook_size, cfg.kmeans_fraction, cfg.seed, layer, cfg.kmeans_max_iters
        )
    centroids = getattr(semantic_codebook, "cluster_centers_", semantic_codebook)

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    D = encoder.cfg.latent_dim
    dis = Disentangler(encoder.num_layers, D, layer, cfg.n_acoustic, cfg.acoustic_codebook_size, cfg.code_dim)
    dis.set_semantic_codebook(centroids)
    decoder = Decoder(DecoderConfig(latent_dim=D, channels=cfg.decoder_channels))

    params = list(dis.parameters()) + list(decoder.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=(0.8, 0.99), weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, cfg.lr_gamma)
    weights = {"mel": cfg.w_mel, "commitment": cfg.w_commit, "codebook": cfg.w_cb}
    seg = cfg.segment_frames * HOP_SAMPLES
    M = 1 + cfg.n_acoustic

    hist = {k: [] for k in ("total", "mel", "commitment", "codebook")}
    alpha_log = []
    for step in range(cfg.steps):
        idx = rng.choice(len(wavs), size=cfg.batch_size, replace=len(wavs) < cfg.batch_size)
        target = np.stack([_crop(wavs[i], seg, rng) for i in idx])
        feats = np.stack(parallel_map(utterance_features, list(target)))
        with torch.no_grad():
            bank = encoder(torch.from_numpy(feats))
        if step == 0:
            with torch.no_grad():
                sem_q = dis.semantic_branch(bank)[1]
                dis.rvq.init_from_data(acoustic_residual(mix_layers(bank, dis.mix_logits), dis.W, sem_q), gen)
        out = dis(bank)
        latent = out.latent
        if cfg.quantizer_dropout > 0:
            keep = torch.full((len(idx),), M)
            drop = torch.rand(len(idx), generator=gen) < cfg.quantizer_dropout
            keep[drop] = torch.randint(1, M + 1, (int(drop.sum()),), generator=gen)
            terms = [t * (keep > m + 1).to(t.dtype)[:, None, None] for m, t in enumerate(out.rvq.terms)]
            latent = compose(out.semantic_quantized, terms)
        y = decoder(latent)
        mel = multiscale_mel_loss(torch.from_numpy(target), y)
        report = stage2_total(
            {"mel": mel, "commitment": out.rvq.commitment_loss, "codebook": out.rvq.codebook_loss}, weights
        )
        try:
            report.check_finite()
        except HASRDError as e:
            raise HASRDError(f"stage-2 step {step}: {e}") from None
        opt.zero_grad()
        report.total.backward()
        _clip_and_step(params, opt, cfg.grad_clip)
        sched.step()
        dis.rvq.reseed_dead_codes(out.rvq, cfg.dead_code_threshold, gen)

        hist["total"].append(report.total.item())
        for k in ("mel", "commitment", "codebook"):
            hist[k].append(report.components[k].item())
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            alpha = dump_mix_weights(dis)
            if alpha.min() < 0 or abs(alpha.sum() - 1) > 1e-6:
                raise HASRDError(f"mixing weights left the simplex at step {step + 1}: {alpha}")
            alpha_log.append(alpha)
            _log(log, report.log_line(step + 1))

    if module_checksum(encoder) != checksum:
        raise HASRDError("encoder parameters changed during codec training")
    model = HASRDModel(encoder, dis.eval(), decoder.eval())
    config = {**cfg.to_config(), "step": str(cfg.steps), "encoder_checksum": checksum}
    ck = model.to_checkpoint(config)
    for k, v in hist.items():
        ck.tensors[f"history.{k}"] = np.asarray(v, dtype=np.float32)
    if alpha_log:
        ck.tensors["history.alpha"] = np.asarray(alpha_log, dtype=np.float32)
    return ck


# ---------------------------------------------------------------------------
# evaluation


def bitrate_kbps(codebook_sizes) -> float:
    return FRAME_RATE * sum(math.ceil(math.log2(k)) for k in codebook_sizes) / 1000.0


def evaluate(corpus, model, n_codebooks: int | None = None, reconstruct=None) -> dict:
    """Mean mel/STFT distances of encode->decode against the hop-aligned input.

    ``reconstruct`` overrides the codec with any ``wav -> wav`` callable.
    """
    if not isinstance(model, HASRDModel):
        model = HASRDModel.from_checkpoint(model)
    wavs = load_corpus(corpus)
    sizes = model.codebook_sizes
    M = len(sizes)
    k = M if n_codebooks is None else n_codebooks
    used = sizes[:k] if k > 0 else sizes[1 : 1 - k]

    def one(wav):
        n = (len(wav) // HOP_SAMPLES) * HOP_SAMPLES
        ref = wav[:n]
        out = reconstruct(ref) if reconstruct is not None else model.reconstruct(wav, k)
        a, b = torch.from_numpy(np.ascontiguousarray(ref)), torch.as_tensor(np.asarray(out, dtype=np.float32))
        with torch.no_grad():
            return float(multiscale_mel_loss(a, b)), float(stft_distance(a, b))

    scores = parallel_map(one, wavs)
    return {
        "mel_distance": float(np.mean([s[0] for s in scores])),
        "stft_distance": float(np.mean([s[1] for s in scores])),
        "bitrate_kbps": bitrate_kbps(used),
        "num_params": model.num_params(),
    }


def format_report(report: dict) -> str:
    return "".join(f"{k} {v}\n" for k, v in report.items())
