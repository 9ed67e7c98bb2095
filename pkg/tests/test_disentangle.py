import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_check
from hasrd.disentangle import (
    DEFAULT_SEMANTIC_LAYER,
    Disentangler,
    acoustic_residual,
    compose,
    dump_mix_weights,
    mix_layers,
    semantic_branch,
)
from hasrd.quantize import rvq_decode
from hasrd.validation import HASRDError, NotFittedError


def _dyadic(shape, rng, denom=64):
    """Small multiples of 1/denom: sums and products of these are exact in f32."""
    return torch.from_numpy(rng.integers(-64, 65, shape).astype(np.float32) / denom)


def test_mix_uniform_thirteen():
    bank = torch.randn(13, 5, 4)
    alpha = torch.softmax(torch.zeros(13), 0)
    np.testing.assert_allclose(alpha.numpy(), np.full(13, 1 / 13), rtol=1e-6)
    torch.testing.assert_close(mix_layers(bank, torch.zeros(13)), bank.mean(0))


def test_mix_saturated_selects_layer():
    bank = torch.randn(4, 6, 3)
    logits = torch.tensor([0.0, 0.0, 45.0, 0.0])
    torch.testing.assert_close(mix_layers(bank, logits), bank[2])


def test_mix_gradient_fd_and_bank_frozen():
    bank = torch.randn(5, 4, 3, dtype=torch.float64)
    w = torch.randn(4, 3, dtype=torch.float64)
    assert fd_check(lambda lg: (mix_layers(bank, lg) * w).sum() ** 2, torch.randn(5)) <= 1e-4
    lg = torch.zeros(5, requires_grad=True)
    mix_layers(bank.float(), lg).sum().backward()
    assert lg.grad is not None


def test_mix_errors():
    with pytest.raises(HASRDError):
        mix_layers(torch.zeros(0, 2, 2), torch.zeros(0))
    with pytest.raises(HASRDError):
        mix_layers(torch.zeros(3, 2, 2), torch.zeros(4))


def test_residual_examples():
    H = torch.randn(6, 4)
    assert torch.equal(acoustic_residual(H, torch.eye(4), H), torch.zeros(6, 4))
    Hs = torch.randn(6, 4)
    assert torch.equal(acoustic_residual(H, torch.zeros(4, 4), Hs), -Hs)
    got = acoustic_residual(torch.tensor([[1.0, 2.0], [3.0, 4.0]]), torch.tensor([[0.0, 1.0], [1.0, 1.0]]),
                            torch.tensor([[1.0, 1.0], [0.0, 2.0]]))
    # H W = [[2, 3], [4, 7]]
    assert got.tolist() == [[1.0, 2.0], [4.0, 5.0]]
    with pytest.raises(HASRDError):
        acoustic_residual(H, torch.eye(3), Hs)


def test_residual_gradient_fd():
    Hs = torch.randn(3, 4, dtype=torch.float64)
    t = torch.randn(3, 4, dtype=torch.float64)
    assert fd_check(lambda H, W: ((acoustic_residual(H, W, Hs) - t) ** 2).sum(), torch.randn(3, 4), torch.randn(4, 4)) <= 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 16))
def test_residual_identity_exact_on_dyadic(seed, u, d):
    rng = np.random.default_rng(seed)
    H, W, Hs = _dyadic((u, d), rng), _dyadic((d, d), rng), _dyadic((u, d), rng)
    assert torch.equal(acoustic_residual(H, W, Hs) + Hs, H @ W)


def test_residual_identity_within_rounding_on_generic():
    torch.manual_seed(0)
    H, W, Hs = torch.randn(64, 64), torch.randn(64, 64), torch.randn(64, 64)
    HW = H @ W
    err = (acoustic_residual(H, W, Hs) + Hs - HW).abs()
    # two roundings of a value of magnitude <= |HW| + |Hs|
    bound = 2 * torch.finfo(torch.float32).eps * (HW.abs() + Hs.abs())
    assert bool((err <= bound).all())


def test_compose_examples():
    s = torch.randn(5, 3)
    assert torch.equal(compose(s, []), s)
    assert torch.equal(compose(s, [-s]), torch.zeros(5, 3))
    a, b, c = torch.randn(3, 5, 3)
    assert torch.equal(compose(s, [a, b, c]), s + ((a + b) + c))
    assert torch.equal(compose(None, [a, b]), a + b)
    with pytest.raises(HASRDError):
        compose(s, [torch.zeros(2, 3)])
    with pytest.raises(HASRDError):
        compose(None, [])


def _state(num_layers=4, dim=8, n_acoustic=3, K=16, seed=0):
    torch.manual_seed(seed)
    d = Disentangler(num_layers, dim, semantic_layer=2, n_acoustic=n_acoustic, acoustic_codebook_size=K, code_dim=4)
    d.set_semantic_codebook(torch.randn(6, dim))
    return d


def test_state_invariants():
    d = _state()
    assert torch.equal(d.W.detach(), torch.eye(8))
    np.testing.assert_allclose(dump_mix_weights(d), np.full(4, 0.25))
    assert d.codebook_sizes == [6, 16, 16, 16]
    assert not d.semantic_codebook.requires_grad
    with pytest.raises(HASRDError):
        Disentangler(4, 8, semantic_layer=4)
    with pytest.raises(HASRDError):
        d.set_semantic_codebook(torch.zeros(1, 8))


def test_default_semantic_layer_is_eight():
    assert DEFAULT_SEMANTIC_LAYER == 8
    assert Disentangler(13, 8).semantic_layer == 8


def test_semantic_branch_exact_and_oracle():
    d = _state()
    bank = torch.randn(4, 10, 8)
    bank[2] = d.semantic_codebook[torch.tensor([0, 5, 3, 3, 1, 0, 2, 4, 5, 1])]
    codes, q = semantic_branch(bank, d)
    assert torch.equal(q, bank[2])
    assert codes.tolist() == [0, 5, 3, 3, 1, 0, 2, 4, 5, 1]
    bank = torch.randn(4, 30, 8)
    codes, _ = d.semantic_branch(bank)
    brute = [int(((d.semantic_codebook - row) ** 2).sum(1).argmin()) for row in bank[2]]
    assert codes.tolist() == brute


def test_untrained_semantic_codebook_errors():
    d = Disentangler(3, 8, semantic_layer=1)
    with pytest.raises(NotFittedError):
        d.semantic_branch(torch.randn(3, 4, 8))


def test_compose_matches_rvq_decode_plus_semantic():
    d = _state()
    bank = torch.randn(4, 2, 12, 8)
    with torch.no_grad():
        out = d(bank)
        dec = rvq_decode(out.codes[..., 1:], d.rvq.stages)
    assert torch.equal(out.latent, out.semantic_quantized + dec)
    assert torch.equal(out.latent, d.latent_from_codes(out.codes))


def test_latent_from_codes_truncation():
    d = _state()
    with torch.no_grad():
        out = d(torch.randn(4, 9, 8))
        terms = out.rvq.terms
        sem = out.semantic_quantized
        assert torch.equal(d.latent_from_codes(out.codes, 1), sem)
        assert torch.equal(d.latent_from_codes(out.codes, 3), sem + (terms[0] + terms[1]))
        assert torch.equal(d.latent_from_codes(out.codes, -2), terms[0] + terms[1])
        for bad in (0, 5, -4):
            with pytest.raises(HASRDError):
                d.latent_from_codes(out.codes, bad)
        bad_codes = out.codes.clone()
        bad_codes[0, 0] = 6
        with pytest.raises(HASRDError):
            d.latent_from_codes(bad_codes)


def test_gradients_reach_w_and_logits_not_bank():
    d = _state()
    bank = torch.randn(4, 12, 8, requires_grad=True)
    out = d(bank)
    (out.latent ** 2).sum().backward()
    assert bank.grad is None
    assert d.W.grad is not None and d.mix_logits.grad is not None
    assert d.W.grad.abs().sum() > 0


def test_convexity_after_optimizer_steps():
    d = _state()
    opt = torch.optim.Adam(d.parameters(), lr=1.0)
    for _ in range(5):
        out = d(torch.randn(4, 10, 8))
        loss = (out.latent ** 2).mean() + out.rvq.commitment_loss
        opt.zero_grad()
        loss.backward()
        opt.step()
        a = dump_mix_weights(d)
        assert a.min() >= 0 and abs(a.sum() - 1) <= 1e-6
