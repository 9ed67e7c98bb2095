import numpy as np
import pytest
import torch

from hasrd.toy import make_toy_corpus, write_toy_corpus
from hasrd.train import TrainConfig, pretrain_mlm, train_codec

ACCEPTANCE_LINES = []


def fd_check(fn, *inputs, step=1e-4, n_coords=24, seed=0):
    """Compare autograd against central differences in float64.

    ``fn`` maps float64 tensors to a scalar.  Returns the worst relative
    error over a random subset of ``n_coords`` coordinates per input,
    measured as ``|| analytic - numeric || / || numeric ||`` on that subset.
    """
    rng = np.random.default_rng(seed)
    xs = [x.detach().double().clone().requires_grad_(True) for x in inputs]
    fn(*xs).backward()
    worst = 0.0
    for i, x in enumerate(xs):
        flat = x.detach().reshape(-1)
        coords = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        num, ana = [], []
        for c in coords:
            probe = [y.detach().clone() for y in xs]
            p = probe[i].reshape(-1)
            p[c] += step
            f_plus = fn(*probe).item()
            p[c] -= 2 * step
            f_minus = fn(*probe).item()
            num.append((f_plus - f_minus) / (2 * step))
            ana.append(x.grad.reshape(-1)[c].item())
        num, ana = np.array(num), np.array(ana)
        scale = max(np.linalg.norm(num), 1e-12)
        worst = max(worst, np.linalg.norm(ana - num) / scale)
    return worst


def lloyd_reference(X, init, max_iters=100, tol=1e-6):
    """Plain-loop Lloyd's iterations used as an oracle; returns (centers, labels, inertia)."""
    X = np.asarray(X, dtype=np.float64)
    C = np.array(init, dtype=np.float64)
    prev = None
    for _ in range(max_iters + 1):
        labels = []
        inertia = 0.0
        for x in X:
            best, best_d = 0, None
            for k, c in enumerate(C):
                d = float(np.sum((x - c) ** 2))
                if best_d is None or d < best_d:
                    best, best_d = k, d
            labels.append(best)
            inertia += best_d
        labels = np.array(labels)
        if prev is not None and (np.array_equal(labels, prev[0]) or (prev[1] - inertia) / prev[1] < tol):
            return C, labels, inertia
        prev = (labels, inertia)
        for k in range(len(C)):
            C[k] = X[labels == k].mean(axis=0)
    return C, labels, inertia


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_corpus():
    return make_toy_corpus(4, seconds=(1.2, 1.6), seed=3)


@pytest.fixture(scope="session")
def toy_corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    write_toy_corpus(d, 3, seconds=(1.1, 1.4), seed=5)
    return d


@pytest.fixture(scope="session")
def tiny_encoder_ckpt(toy_corpus):
    cfg = TrainConfig(stage="mlm", steps=3, batch_size=2, rpq_codebook_size=64, log_every=0, seed=0)
    return pretrain_mlm(toy_corpus, cfg)


@pytest.fixture(scope="session")
def tiny_codec_ckpt(toy_corpus, tiny_encoder_ckpt):
    cfg = TrainConfig(
        stage="codec", steps=3, batch_size=2, segment_seconds=1.0, log_every=1,
        semantic_codebook_size=8, acoustic_codebook_size=16, n_acoustic=3, kmeans_fraction=1.0, seed=0,
    )
    return train_codec(toy_corpus, tiny_encoder_ckpt, cfg)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
