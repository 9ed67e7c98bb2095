import subprocess
import sys
import wave

import numpy as np
import pytest

from hasrd.checkpoint import Checkpoint
from hasrd.cli import main
from hasrd.codec_io import read_tokens, read_wav

TRAIN_FLAGS = ["--steps", "2", "--batch-size", "2", "--segment-seconds", "1.0", "--seed", "3"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, toy_corpus_dir):
    d = tmp_path_factory.mktemp("cli")
    assert main(["pretrain", "--corpus", str(toy_corpus_dir), "--out", str(d / "enc.ckpt"),
                 "--rpq-codebook-size", "64", "--log", str(d / "pre.log"), *TRAIN_FLAGS]) == 0
    assert main(["fit-kmeans", "--corpus", str(toy_corpus_dir), "--ckpt", str(d / "enc.ckpt"), "--k", "8",
                 "--fraction", "1.0", "--out", str(d / "cb.ckpt")]) == 0
    assert main(["train", "--corpus", str(toy_corpus_dir), "--encoder", str(d / "enc.ckpt"),
                 "--codebook", str(d / "cb.ckpt"), "--out", str(d / "codec.ckpt"), "--n-acoustic", "3",
                 "--acoustic-codebook-size", "16", "--log-every", "1", "--log", str(d / "train.log"),
                 *TRAIN_FLAGS]) == 0
    return d


def test_pipeline_artifacts(workdir):
    assert Checkpoint.load(workdir / "enc.ckpt").stage == "mlm"
    cb = Checkpoint.load(workdir / "cb.ckpt")
    assert cb.stage == "kmeans" and cb.tensors["semantic.codebook"].shape == (8, 64)
    assert Checkpoint.load(workdir / "codec.ckpt").stage == "codec"
    assert len((workdir / "train.log").read_text().splitlines()) == 2


def test_encode_decode_round_trip(workdir, toy_corpus_dir):
    wav = sorted(toy_corpus_dir.glob("*.wav"))[0]
    htok, out = workdir / "a.htok", workdir / "a.wav"
    assert main(["encode", "--ckpt", str(workdir / "codec.ckpt"), "--in", str(wav), "--out", str(htok)]) == 0
    tokens = read_tokens(htok)
    assert tokens.codebook_sizes == (8, 16, 16, 16)
    assert main(["decode", "--ckpt", str(workdir / "codec.ckpt"), "--in", str(htok), "--out", str(out)]) == 0
    n = len(read_wav(wav))
    assert len(read_wav(out)) == (n // 512) * 512 == tokens.num_frames * 512
    for k in ("1", "-2"):
        assert main(["decode", "--ckpt", str(workdir / "codec.ckpt"), "--in", str(htok), "--out",
                     str(workdir / f"k{k}.wav"), "--codebooks", k]) == 0
    assert not np.array_equal(read_wav(workdir / "k1.wav"), read_wav(out))


def test_semantic_only_decode_matches_library(workdir, toy_corpus_dir):
    from hasrd.codec_io import pcm16
    from hasrd.train import HASRDModel

    wav = sorted(toy_corpus_dir.glob("*.wav"))[1]
    htok = workdir / "b.htok"
    main(["encode", "--ckpt", str(workdir / "codec.ckpt"), "--in", str(wav), "--out", str(htok)])
    main(["decode", "--ckpt", str(workdir / "codec.ckpt"), "--in", str(htok), "--out", str(workdir / "b1.wav"),
          "--codebooks", "1"])
    model = HASRDModel.from_checkpoint(workdir / "codec.ckpt")
    expected = pcm16(model.decode(read_tokens(htok), 1))
    with wave.open(str(workdir / "b1.wav")) as w:
        assert w.readframes(w.getnframes()) == expected.tobytes()


def test_eval_and_dump_weights(workdir, toy_corpus_dir, capsys):
    assert main(["eval", "--ckpt", str(workdir / "codec.ckpt"), "--corpus", str(toy_corpus_dir)]) == 0
    report = dict(line.split() for line in capsys.readouterr().out.splitlines())
    assert set(report) == {"mel_distance", "stft_distance", "bitrate_kbps", "num_params"}
    assert float(report["bitrate_kbps"]) == 31.25 * (3 + 3 * 4) / 1000

    assert main(["dump-weights", "--ckpt", str(workdir / "enc.ckpt")]) == 0
    fresh = [float(v) for v in capsys.readouterr().out.split()]
    assert fresh == [1 / 3] * 3
    assert main(["dump-weights", "--ckpt", str(workdir / "codec.ckpt")]) == 0
    alpha = np.array([float(v) for v in capsys.readouterr().out.split()])
    assert alpha.shape == (3,) and abs(alpha.sum() - 1) < 1e-6


def test_seed_controls_randomness(workdir, toy_corpus_dir, tmp_path):
    args = ["pretrain", "--corpus", str(toy_corpus_dir), "--rpq-codebook-size", "64", *TRAIN_FLAGS]
    main([*args, "--out", str(tmp_path / "x.ckpt"), "--log", str(tmp_path / "x.log")])
    assert (tmp_path / "x.ckpt").read_bytes() == (workdir / "enc.ckpt").read_bytes()


def test_errors_name_the_stage(workdir, tmp_path, capsys):
    assert main(["encode", "--ckpt", str(tmp_path / "none.ckpt"), "--in", "x.wav", "--out", "y.htok"]) == 1
    err = capsys.readouterr().err.strip()
    assert err.count("\n") == 0 and "load-checkpoint" in err

    stereo = tmp_path / "st.wav"
    with wave.open(str(stereo), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(16000)
        w.writeframes(b"\x00" * 4000)
    assert main(["encode", "--ckpt", str(workdir / "codec.ckpt"), "--in", str(stereo), "--out", "y.htok"]) == 1
    assert "read-audio" in capsys.readouterr().err

    bad = tmp_path / "bad.htok"
    bad.write_bytes(b"JUNKJUNKJUNK")
    assert main(["decode", "--ckpt", str(workdir / "codec.ckpt"), "--in", str(bad), "--out", "z.wav"]) == 1
    assert "read-tokens: bad magic" in capsys.readouterr().err

    assert main(["train", "--corpus", str(tmp_path), "--encoder", str(workdir / "enc.ckpt"), "--out", "c.ckpt",
                 "--steps", "1"]) == 1
    assert "train:" in capsys.readouterr().err

    assert main(["train", "--corpus", str(tmp_path), "--encoder", str(workdir / "enc.ckpt"),
                 "--codebook", str(workdir / "enc.ckpt"), "--out", "c.ckpt"]) == 1
    assert "not a codebook" in capsys.readouterr().err


def test_unknown_flags_rejected(capsys):
    assert main(["dump-weights", "--ckpt", "a", "--bogus"]) == 2
    assert main(["nonsense"]) == 2
    assert main([]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "hasrd", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "dump-weights" in res.stdout
