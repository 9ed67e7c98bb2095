import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_check
from hasrd.features import mel_filterbank
from hasrd.losses import (
    DEFAULT_WEIGHTS,
    MEL_BINS,
    MEL_WINDOWS,
    LossReport,
    MelScaleSet,
    mlm_loss,
    multiscale_mel_loss,
    parse_log_line,
    stage2_total,
    stft_distance,
)
from hasrd.validation import HASRDError


def dft_frames(x, w):
    """Magnitude spectra by an explicit DFT sum, periodic Hann, hop w // 4, no centring."""
    x = np.asarray(x, np.float64)
    if len(x) < w:
        x = np.pad(x, (0, w - len(x)))
    n = np.arange(w)
    win = 0.5 - 0.5 * np.cos(2 * np.pi * n / w)
    basis = np.exp(-2j * np.pi * np.outer(n, np.arange(w // 2 + 1)) / w)
    starts = range(0, len(x) - w + 1, w // 4)
    return np.abs(np.stack([(x[s : s + w] * win) @ basis for s in starts])).T


def ref_mel_loss(x, y):
    terms = []
    for w, m in zip(MEL_WINDOWS, MEL_BINS):
        fb = mel_filterbank(w, m)
        a = np.log10(np.maximum(fb @ dft_frames(x, w), 1e-5))
        b = np.log10(np.maximum(fb @ dft_frames(y, w), 1e-5))
        terms.append(np.abs(a - b).mean())
    return float(np.mean(terms))


def ref_stft(x, y):
    terms = []
    for w in (2048, 512):
        a = np.log10(np.maximum(dft_frames(x, w), 1e-5))
        b = np.log10(np.maximum(dft_frames(y, w), 1e-5))
        terms.append(np.abs(a - b).mean())
    return float(np.mean(terms))


# -- MLM -------------------------------------------------------------------------


def test_mlm_uniform_is_ln_k():
    K = 37
    loss = mlm_loss(torch.zeros(20, K), torch.randint(K, (20,)), np.array([0, 3, 9]))
    assert loss.item() == pytest.approx(math.log(K), abs=1e-6)
    loss64 = mlm_loss(torch.zeros(2, 20, 8192, dtype=torch.float64), torch.randint(8192, (2, 20)), torch.ones(2, 20, dtype=torch.bool))
    assert loss64.item() == pytest.approx(math.log(8192), abs=1e-12)


def test_mlm_confident_correct_goes_to_zero():
    labels = torch.tensor([2, 0, 1])
    logits = torch.zeros(3, 4)
    logits[torch.arange(3), labels] = 60.0
    assert mlm_loss(logits, labels, [0, 1, 2]).item() < 1e-20


def test_mlm_only_masked_positions_count():
    logits = torch.randn(10, 5)
    labels = torch.randint(5, (10,))
    base = mlm_loss(logits, labels, [1, 4]).item()
    logits[0] += 100 * torch.randn(5)
    assert mlm_loss(logits, labels, [1, 4]).item() == base


def test_mlm_empty_mask_errors():
    with pytest.raises(HASRDError):
        mlm_loss(torch.zeros(4, 3), torch.zeros(4), np.array([], dtype=int))
    with pytest.raises(HASRDError):
        mlm_loss(torch.zeros(4, 3), torch.zeros(4), torch.zeros(4, dtype=torch.bool))


def test_mlm_gradient_fd():
    labels = torch.randint(6, (8,))
    assert fd_check(lambda z: mlm_loss(z, labels, [0, 2, 5, 7]), torch.randn(8, 6)) <= 1e-4


# -- mel / STFT distances ------------------------------------------------------------


def test_scale_set():
    s = MelScaleSet()
    assert list(s) == list(zip((32, 64, 128, 256, 512, 1024, 2048), (5, 10, 20, 40, 80, 160, 320)))
    with pytest.raises(HASRDError):
        MelScaleSet((32, 64), (5,))


def test_mel_loss_identity_symmetry_and_reference():
    rng = np.random.default_rng(0)
    x = rng.uniform(-0.5, 0.5, 4096)
    tx = torch.from_numpy(x)
    assert multiscale_mel_loss(tx, tx).item() == 0.0
    y = 0.5 * x
    ty = torch.from_numpy(y)
    got = multiscale_mel_loss(tx, ty).item()
    assert got > 0
    assert got == multiscale_mel_loss(ty, tx).item()
    assert abs(got - ref_mel_loss(x, y)) <= 1e-6


def test_stft_distance_reference():
    rng = np.random.default_rng(1)
    x, y = rng.normal(0, 0.3, 4096), rng.normal(0, 0.3, 4096)
    got = stft_distance(torch.from_numpy(x), torch.from_numpy(y)).item()
    assert abs(got - ref_stft(x, y)) <= 1e-6
    assert stft_distance(torch.from_numpy(x), torch.from_numpy(x)).item() == 0.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(600, 5000))
def test_distances_nonnegative_symmetric(seed, n):
    rng = np.random.default_rng(seed)
    a, b = torch.from_numpy(rng.normal(size=n)), torch.from_numpy(rng.normal(size=n))
    for f in (multiscale_mel_loss, stft_distance):
        d = f(a, b).item()
        assert d >= 0 and d == f(b, a).item()


def test_length_mismatch_errors():
    with pytest.raises(HASRDError, match="length"):
        multiscale_mel_loss(torch.zeros(100), torch.zeros(101))
    with pytest.raises(HASRDError, match="length"):
        stft_distance(torch.zeros(100), torch.zeros(101))


def test_mel_loss_batched_matches_mean_of_items():
    rng = np.random.default_rng(2)
    x = torch.from_numpy(rng.normal(size=(3, 3000)))
    y = torch.from_numpy(rng.normal(size=(3, 3000)))
    batched = multiscale_mel_loss(x, y).item()
    assert batched == pytest.approx(np.mean([multiscale_mel_loss(x[i], y[i]).item() for i in range(3)]), rel=1e-12)


def test_mel_loss_gradient_fd():
    rng = np.random.default_rng(3)
    target = torch.from_numpy(rng.normal(0, 0.3, 2048))
    assert fd_check(lambda x: multiscale_mel_loss(target, x), torch.from_numpy(rng.normal(0, 0.3, 2048)), n_coords=12) <= 1e-4


# -- aggregation -------------------------------------------------------------------


def test_stage2_total_examples():
    zero = {k: torch.tensor(0.0) for k in ("mel", "commitment", "codebook")}
    assert stage2_total(zero).total.item() == 0
    ones = {k: torch.tensor(1.0) for k in ("mel", "commitment", "codebook")}
    rep = stage2_total(ones)
    assert rep.total.item() == 16.25
    assert rep.components == ones
    assert DEFAULT_WEIGHTS == {"mel": 15.0, "commitment": 0.25, "codebook": 1.0}
    with pytest.raises(HASRDError, match="commitment"):
        stage2_total({"mel": torch.tensor(1.0), "codebook": torch.tensor(1.0)})


def test_report_finiteness_names_component():
    rep = stage2_total({"mel": torch.tensor(1.0), "commitment": torch.tensor(float("nan")), "codebook": torch.tensor(0.0)})
    with pytest.raises(HASRDError, match="commitment"):
        rep.check_finite()


def test_log_line_round_trip():
    rep = LossReport(torch.tensor(3.5), {"mel": 0.2, "commitment": 0.1, "codebook": 0.4})
    line = rep.log_line(12)
    assert line.startswith("step 12 total ")
    parsed = parse_log_line(line)
    assert parsed == {"step": 12, "total": 3.5, "mel": 0.2, "commit": 0.1, "cb": 0.4}
    with pytest.raises(HASRDError):
        parse_log_line("total 1")
