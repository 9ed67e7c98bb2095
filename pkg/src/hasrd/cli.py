"""Command-line interface: ``hasrd <command> [flags]``."""

from __future__ import annotations

import argparse
import sys
from contextlib import contextmanager

import numpy as np

from .checkpoint import Checkpoint
from .codec_io import read_tokens, read_wav, write_tokens, write_wav
from .train import (
    HASRDModel,
    TrainConfig,
    codebook_checkpoint,
    evaluate,
    fit_semantic_codebook,
    format_report,
    model_mix_weights,
    pretrain_mlm,
    train_codec,
)


class CommandError(Exception):
    pass


@contextmanager
def stage(name: str):
    try:
        yield
    except CommandError:
        raise
    except (ValueError, OSError, KeyError, RuntimeError) as e:
        raise CommandError(f"{name}: {e}") from e


def _logger(path):
    if path is None:
        return lambda line: print(line, file=sys.stderr)
    fh = open(path, "a", encoding="utf-8")
    return lambda line: (fh.write(line + "\n"), fh.flush())


def _train_config(args, stage_name: str) -> TrainConfig:
    kw = {"stage": stage_name, "seed": args.seed}
    for flag, field in (
        ("steps", "steps"), ("batch_size", "batch_size"), ("lr", "learning_rate"),
        ("segment_seconds", "segment_seconds"), ("log_every", "log_every"),
    ):
        if getattr(args, flag, None) is not None:
            kw[field] = getattr(args, flag)
    for flag in ("latent_dim", "num_attention_layers", "decoder_channels", "semantic_layer", "n_acoustic",
                 "acoustic_codebook_size", "semantic_codebook_size", "kmeans_fraction", "rpq_codebook_size"):
        if getattr(args, flag, None) is not None:
            kw[flag] = getattr(args, flag)
    return TrainConfig(**kw)


def cmd_pretrain(args):
    with stage("pretrain"):
        cfg = _train_config(args, "mlm")
        ck = pretrain_mlm(args.corpus, cfg, log=_logger(args.log))
    with stage("write-checkpoint"):
        ck.save(args.out)


def cmd_fit_kmeans(args):
    with stage("load-checkpoint"):
        enc = Checkpoint.load(args.ckpt)
    with stage("fit-kmeans"):
        cb = fit_semantic_codebook(args.corpus, enc, args.k, args.fraction, args.seed, args.semantic_layer)
    with stage("write-codebook"):
        codebook_checkpoint(cb, cb.semantic_layer_).save(args.out)


def cmd_train(args):
    with stage("load-checkpoint"):
        enc = Checkpoint.load(args.encoder)
        cb = None
        if args.codebook:
            ckb = Checkpoint.load(args.codebook)
            if ckb.stage != "kmeans":
                raise CommandError(f"load-checkpoint: {args.codebook} is not a codebook file")
            cb = ckb.tensors["semantic.codebook"]
            if args.semantic_layer is None:
                args.semantic_layer = int(ckb.config["semantic_layer"])
    with stage("train"):
        cfg = _train_config(args, "codec")
        ck = train_codec(args.corpus, enc, cfg, semantic_codebook=cb, log=_logger(args.log))
    with stage("write-checkpoint"):
        ck.save(args.out)


def _load_model(path) -> HASRDModel:
    with stage("load-checkpoint"):
        return HASRDModel.from_checkpoint(Checkpoint.load(path))


def cmd_encode(args):
    model = _load_model(args.ckpt)
    with stage("read-audio"):
        wav = read_wav(args.inp)
    with stage("encode"):
        tokens = model.encode(wav)
    with stage("write-tokens"):
        write_tokens(tokens, args.out)


def cmd_decode(args):
    model = _load_model(args.ckpt)
    with stage("read-tokens"):
        tokens = read_tokens(args.inp)
    with stage("decode"):
        wav = model.decode(tokens, args.codebooks)
    with stage("write-audio"):
        write_wav(args.out, wav)


def cmd_eval(args):
    model = _load_model(args.ckpt)
    with stage("eval"):
        report = evaluate(args.corpus, model, args.codebooks)
    sys.stdout.write(format_report(report))


def cmd_dump_weights(args):
    with stage("load-checkpoint"):
        ck = Checkpoint.load(args.ckpt)
        model = HASRDModel.from_checkpoint(ck)
    if model.trained:
        alpha = model_mix_weights(model)
    else:
        n = model.encoder.num_layers
        alpha = np.full(n, 1.0 / n)
    sys.stdout.write("".join(f"{a!r}\n" for a in alpha.tolist()))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hasrd", description="Semantic/acoustic speech tokenizer")
    sub = p.add_subparsers(dest="command", required=True)

    def common_train(sp):
        sp.add_argument("--corpus", required=True, help="directory of 16 kHz mono WAV files")
        sp.add_argument("--out", required=True)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--segment-seconds", type=float)
        sp.add_argument("--log-every", type=int)
        sp.add_argument("--log", help="append loss lines to this file instead of stderr")

    sp = sub.add_parser("pretrain", help="stage 1: masked-label encoder pretraining")
    common_train(sp)
    sp.add_argument("--latent-dim", type=int)
    sp.add_argument("--num-attention-layers", type=int)
    sp.add_argument("--rpq-codebook-size", type=int)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("fit-kmeans", help="fit the semantic k-means codebook")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--fraction", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--semantic-layer", type=int)
    sp.set_defaults(func=cmd_fit_kmeans)

    sp = sub.add_parser("train", help="stage 2: frozen-encoder codec training")
    common_train(sp)
    sp.add_argument("--encoder", required=True, help="stage-1 checkpoint")
    sp.add_argument("--codebook", help="semantic codebook from fit-kmeans (fit on the fly if omitted)")
    sp.add_argument("--decoder-channels", type=int)
    sp.add_argument("--semantic-layer", type=int)
    sp.add_argument("--n-acoustic", type=int)
    sp.add_argument("--acoustic-codebook-size", type=int)
    sp.add_argument("--semantic-codebook-size", type=int)
    sp.add_argument("--kmeans-fraction", type=float)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("encode", help="waveform -> token file")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="inp", metavar="PATH", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_encode)

    sp = sub.add_parser("decode", help="token file -> waveform")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--in", dest="inp", metavar="PATH", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--codebooks", type=int, help="k>0: semantic + k-1 acoustic; -k: first k acoustic only")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("eval", help="print reconstruction metrics over a corpus")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--codebooks", type=int)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("dump-weights", help="print layer mixing weights, one per line")
    sp.add_argument("--ckpt", required=True)
    sp.set_defaults(func=cmd_dump_weights)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        args.func(args)
    except CommandError as e:
        print(f"hasrd {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
