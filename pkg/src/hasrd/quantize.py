"""Quantizers: frozen random-projection labeller, offline k-means, residual VQ.

The random-projection quantizer and k-means live in numpy; they are never
differentiated.  The residual VQ stages are torch modules trained with
commitment/codebook losses and a straight-through estimator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from torch import nn

from .validation import HASRDError, check_is_fitted, check_matrix, check_positive_int

# ---------------------------------------------------------------------------
# Random projection quantizer


class RandomProjectionQuantizer(TransformerMixin, BaseEstimator):
    """Frozen random projection followed by a cosine codebook lookup.

    ``fit`` only draws the projection and the unit-norm codebook from
    ``seed``; the data is used to check the input width.  ``predict`` returns
    one label per row.
    """

    def __init__(self, input_dim: int = 320, code_dim: int = 16, codebook_size: int = 8192, seed: int = 0):
        self.input_dim = input_dim
        self.code_dim = code_dim
        self.codebook_size = codebook_size
        self.seed = seed

    def fit(self, X=None, y=None):
        check_positive_int(self.input_dim, "input_dim")
        check_positive_int(self.code_dim, "code_dim", 2)
        check_positive_int(self.codebook_size, "codebook_size", 2)
        if X is not None:
            check_matrix(X, "X", ncols=self.input_dim)
        rng = np.random.default_rng(self.seed)
        proj = rng.standard_normal((self.input_dim, self.code_dim)) / np.sqrt(self.input_dim)
        cb = rng.standard_normal((self.codebook_size, self.code_dim))
        cb /= np.linalg.norm(cb, axis=1, keepdims=True)
        self.projection_ = proj.astype(np.float32)
        self.codebook_ = cb.astype(np.float32)
        self.projection_.setflags(write=False)
        self.codebook_.setflags(write=False)
        self.zero_norm_count_ = 0
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "codebook_")
        x = check_matrix(X, "X", ncols=self.input_dim).astype(np.float64)
        p = x @ self.projection_.astype(np.float64)
        norms = np.linalg.norm(p, axis=1)
        zero = norms == 0
        if zero.any():
            self.zero_norm_count_ += int(zero.sum())
            warnings.warn(f"{int(zero.sum())} zero-norm projected frames labelled 0", RuntimeWarning)
        sims = (p / np.where(zero, 1.0, norms)[:, None]) @ self.codebook_.astype(np.float64).T
        labels = np.argmax(sims, axis=1)
        labels[zero] = 0
        return labels

    def transform(self, X) -> np.ndarray:
        return self.predict(X)


def rpq_init(seed: int, input_dim: int = 320, code_dim: int = 16, K: int = 8192) -> RandomProjectionQuantizer:
    return RandomProjectionQuantizer(input_dim, code_dim, K, seed).fit()


def rpq_labels(q: RandomProjectionQuantizer, x) -> np.ndarray:
    return q.predict(x)


# ---------------------------------------------------------------------------
# k-means


def squared_distances(X: np.ndarray, C: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact pairwise squared Euclidean distances, computed by differences."""
    out = np.empty((X.shape[0], C.shape[0]), dtype=np.float64)
    for s in range(0, X.shape[0], chunk):
        diff = X[s : s + chunk, None, :] - C[None, :, :]
        out[s : s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeanspp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(X.shape[0])]]
    d = squared_distances(X, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = d.sum()
        if total <= 0:
            raise HASRDError("k-means++ ran out of distinct points")
        i = rng.choice(X.shape[0], p=d / total)
        centers.append(X[i])
        d = np.minimum(d, squared_distances(X, X[i][None])[:, 0])
    return np.stack(centers)


class KMeansCodebook(ClusterMixin, TransformerMixin, BaseEstimator):
    """Lloyd's k-means with k-means++ seeding.

    ``inertia_history_`` records the sum of squared distances after every
    assignment step, starting from the initial centroids.  Empty clusters are
    reseeded to the point farthest from its centroid.
    """

    def __init__(self, n_clusters: int = 1024, max_iter: int = 100, tol: float = 1e-6, seed: int = 0, init=None):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed
        self.init = init

    def fit(self, X, y=None):
        X = check_matrix(X, "X", dtype=np.float64)
        K = check_positive_int(self.n_clusters, "n_clusters")
        n_distinct = np.unique(X, axis=0).shape[0]
        if n_distinct < K:
            raise HASRDError(f"k-means needs at least {K} distinct vectors, got {n_distinct}")
        if self.init is None:
            C = _kmeanspp(X, K, np.random.default_rng(self.seed))
        else:
            C = check_matrix(self.init, "init", ncols=X.shape[1], dtype=np.float64).copy()
            if C.shape[0] != K:
                raise HASRDError(f"init must have {K} rows, got {C.shape[0]}")

        self.init_centers_ = C.copy()
        dist = squared_distances(X, C)
        labels = np.argmin(dist, axis=1)
        d = dist[np.arange(X.shape[0]), labels]
        history = [float(d.sum())]
        n_iter = 0
        for n_iter in range(1, self.max_iter + 1):
            labels, d = labels.copy(), d.copy()
            counts = np.bincount(labels, minlength=K)
            for k in np.flatnonzero(counts == 0):
                far = int(np.argmax(d))
                labels[far] = k
                d[far] = 0.0
            for k in range(K):
                C[k] = X[labels == k].mean(axis=0)
            dist = squared_distances(X, C)
            new_labels = np.argmin(dist, axis=1)
            d = dist[np.arange(X.shape[0]), new_labels]
            history.append(float(d.sum()))
            converged = np.array_equal(new_labels, labels)
            labels = new_labels
            prev = history[-2]
            if converged or (prev > 0 and (prev - history[-1]) / prev < self.tol) or history[-1] == 0:
                break

        self.cluster_centers_ = C
        self.labels_ = labels
        self.inertia_ = history[-1]
        self.inertia_history_ = history
        self.n_iter_ = n_iter
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "cluster_centers_")
        X = check_matrix(X, "X", ncols=self.cluster_centers_.shape[1], dtype=np.float64)
        return np.argmin(squared_distances(X, self.cluster_centers_), axis=1)

    def transform(self, X) -> np.ndarray:
        """Replace every row with its nearest centroid."""
        return self.cluster_centers_[self.predict(X)]


def kmeans_fit(vectors, K: int, max_iters: int = 100, seed: int = 0, init=None) -> KMeansCodebook:
    return KMeansCodebook(K, max_iters, seed=seed, init=init).fit(vectors)


# ---------------------------------------------------------------------------
# Differentiable quantizers


@dataclass
class QuantizeResult:
    codes: torch.Tensor
    quantized: torch.Tensor
    commitment_loss: torch.Tensor
    codebook_loss: torch.Tensor


def vq_losses(pre_q: torch.Tensor, post_q: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Commitment and codebook mean-squared errors with opposite stop-gradients."""
    if pre_q.shape != post_q.shape:
        raise HASRDError(f"shape mismatch: {tuple(pre_q.shape)} vs {tuple(post_q.shape)}")
    commitment = F.mse_loss(pre_q, post_q.detach())
    codebook = F.mse_loss(pre_q.detach(), post_q)
    return commitment, codebook


def straight_through(pre_q: torch.Tensor, post_q: torch.Tensor) -> torch.Tensor:
    """Value of ``post_q``, gradient of the identity with respect to ``pre_q``.

    Written as ``post_q + (pre_q - pre_q)`` so the forward value is exactly
    ``post_q`` and a later table lookup reproduces it bit for bit.
    """
    return post_q.detach() + (pre_q - pre_q.detach())


def nearest_code(x: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the nearest codebook row (Euclidean); ties go to the lowest index."""
    flat = x.reshape(-1, x.shape[-1])
    d = torch.cdist(flat, codebook.to(flat.dtype), compute_mode="donot_use_mm_for_euclid_dist")
    return d.argmin(dim=-1).reshape(x.shape[:-1])


def kmeans_quantize(h: torch.Tensor, codebook: torch.Tensor) -> QuantizeResult:
    """Map rows of ``h`` to their nearest centroid of a frozen codebook."""
    if h.shape[-1] != codebook.shape[-1]:
        raise HASRDError(f"codebook width {codebook.shape[-1]} != input width {h.shape[-1]}")
    with torch.no_grad():
        codes = nearest_code(h, codebook)
        quantized = codebook.to(h.dtype)[codes]
        commitment = F.mse_loss(h, quantized)
    return QuantizeResult(codes, quantized, commitment, torch.zeros((), dtype=h.dtype))


class RvqStage(nn.Module):
    """One residual stage: project to ``code_dim``, look up, project back."""

    def __init__(self, dim: int, codebook_size: int = 1024, code_dim: int = 8):
        super().__init__()
        self.in_proj = nn.Linear(dim, code_dim)
        self.out_proj = nn.Linear(code_dim, dim)
        self.codebook = nn.Parameter(torch.randn(codebook_size, code_dim))
        self.register_buffer("unused_steps", torch.zeros(codebook_size, dtype=torch.long), persistent=False)

    @property
    def codebook_size(self) -> int:
        return self.codebook.shape[0]

    def quantize(self, residual: torch.Tensor):
        z_e = self.in_proj(residual)
        codes = nearest_code(z_e.detach(), self.codebook.detach())
        z_q = F.embedding(codes, self.codebook)
        commitment, cb_loss = vq_losses(z_e, z_q)
        out = self.out_proj(straight_through(z_e, z_q))
        return codes, out, commitment, cb_loss, z_e

    def decode(self, codes: torch.Tensor) -> torch.Tensor:
        return self.out_proj(F.embedding(codes, self.codebook))

    @torch.no_grad()
    def reseed_dead_codes(self, codes: torch.Tensor, z_e: torch.Tensor, threshold: int, generator: torch.Generator) -> int:
        """Reseed entries unused for ``threshold`` consecutive calls; returns the count."""
        used = torch.zeros(self.codebook_size, dtype=torch.bool, device=codes.device)
        used[codes.reshape(-1)] = True
        self.unused_steps += 1
        self.unused_steps[used] = 0
        dead = torch.nonzero(self.unused_steps >= threshold).flatten()
        if dead.numel() == 0:
            return 0
        pool = z_e.reshape(-1, z_e.shape[-1])
        pick = torch.randint(pool.shape[0], (dead.numel(),), generator=generator)
        self.codebook[dead] = pool[pick].to(self.codebook.dtype)
        self.unused_steps[dead] = 0
        return int(dead.numel())


@dataclass
class RvqEncoding:
    codes: torch.Tensor  # (..., U, n_stages)
    quantized_sum: torch.Tensor
    commitment_loss: torch.Tensor
    codebook_loss: torch.Tensor
    terms: list = field(default_factory=list)
    projected: list = field(default_factory=list)


def rvq_encode(residual: torch.Tensor, stages, n_stages: int | None = None) -> RvqEncoding:
    """Quantize ``residual`` with successive stages, each on what is left over.

    ``quantized_sum`` accumulates stage outputs left to right in stage order,
    the same summation :func:`rvq_decode` performs.
    """
    stages = list(stages)
    if not stages:
        raise HASRDError("residual VQ needs at least one stage")
    if n_stages is not None:
        stages = stages[:n_stages]
    dim = stages[0].in_proj.in_features
    if residual.shape[-1] != dim:
        raise HASRDError(f"residual width {residual.shape[-1]} != stage width {dim}")
    r = residual
    codes, terms, projected = [], [], []
    commitment = residual.new_zeros(())
    cb_loss = residual.new_zeros(())
    total = None
    for stage in stages:
        c, out, com, cbl, z_e = stage.quantize(r)
        codes.append(c)
        terms.append(out)
        projected.append(z_e)
        commitment = commitment + com
        cb_loss = cb_loss + cbl
        total = out if total is None else total + out
        r = r - out
    return RvqEncoding(torch.stack(codes, dim=-1), total, commitment, cb_loss, terms, projected)


def rvq_terms(codes: torch.Tensor, stages) -> list:
    stages = list(stages)
    if codes.shape[-1] > len(stages):
        raise HASRDError(f"{codes.shape[-1]} code streams but only {len(stages)} stages")
    terms = []
    for m in range(codes.shape[-1]):
        c = codes[..., m]
        K = stages[m].codebook_size
        if c.numel() and (int(c.min()) < 0 or int(c.max()) >= K):
            raise HASRDError(f"code out of range for stage {m} (size {K})")
        terms.append(stages[m].decode(c))
    return terms


def rvq_decode(codes: torch.Tensor, stages) -> torch.Tensor:
    """Sum of out-projected code vectors, accumulated left to right."""
    terms = rvq_terms(codes, stages)
    if not terms:
        raise HASRDError("no code streams to decode")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


class ResidualVQ(nn.Module):
    def __init__(self, dim: int, n_stages: int = 8, codebook_size: int = 1024, code_dim: int = 8):
        super().__init__()
        self.stages = nn.ModuleList(RvqStage(dim, codebook_size, code_dim) for _ in range(n_stages))

    def forward(self, residual, n_stages: int | None = None) -> RvqEncoding:
        return rvq_encode(residual, self.stages, n_stages)

    def decode(self, codes):
        return rvq_decode(codes, self.stages)

    @torch.no_grad()
    def init_from_data(self, residual: torch.Tensor, generator: torch.Generator) -> None:
        """Seed every stage's codebook with projected residuals of ``residual``."""
        r = residual.reshape(-1, residual.shape[-1])
        for stage in self.stages:
            z = stage.in_proj(r)
            stage.codebook.copy_(z[torch.randint(len(z), (stage.codebook_size,), generator=generator)])
            r = r - stage.out_proj(z)

    def reseed_dead_codes(self, enc: RvqEncoding, threshold: int, generator) -> int:
        n = 0
        for m, stage in enumerate(self.stages[: enc.codes.shape[-1]]):
            n += stage.reseed_dead_codes(enc.codes[..., m], enc.projected[m].detach(), threshold, generator)
        return n


class ResidualVectorQuantizer(TransformerMixin, BaseEstimator):
    """Stand-alone residual VQ trained on a matrix of vectors.

    ``transform`` returns ``(n, n_stages)`` codes and ``inverse_transform``
    maps codes back to vectors.  Training minimizes reconstruction MSE plus
    the weighted commitment and codebook losses.
    """

    def __init__(
        self,
        n_stages: int = 8,
        codebook_size: int = 1024,
        code_dim: int = 8,
        n_steps: int = 2000,
        batch_size: int = 256,
        learning_rate: float = 1e-3,
        commitment_weight: float = 0.25,
        codebook_weight: float = 1.0,
        dead_code_threshold: int = 100,
        seed: int = 0,
    ):
        self.n_stages = n_stages
        self.codebook_size = codebook_size
        self.code_dim = code_dim
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.commitment_weight = commitment_weight
        self.codebook_weight = codebook_weight
        self.dead_code_threshold = dead_code_threshold
        self.seed = seed

    def fit(self, X, y=None):
        X = torch.as_tensor(check_matrix(X, "X"))
        torch.manual_seed(self.seed)
        gen = torch.Generator().manual_seed(self.seed)
        rvq = ResidualVQ(X.shape[1], self.n_stages, self.codebook_size, self.code_dim)
        rvq.init_from_data(X, gen)
        opt = torch.optim.Adam(rvq.parameters(), lr=self.learning_rate)
        history = []
        for _ in range(self.n_steps):
            idx = torch.randint(len(X), (min(self.batch_size, len(X)),), generator=gen)
            x = X[idx]
            enc = rvq(x)
            loss = (
                F.mse_loss(enc.quantized_sum, x)
                + self.commitment_weight * enc.commitment_loss
                + self.codebook_weight * enc.codebook_loss
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
            rvq.reseed_dead_codes(enc, self.dead_code_threshold, gen)
            history.append(loss.item())
        self.module_ = rvq.eval()
        self.loss_history_ = history
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "module_")
        with torch.no_grad():
            return self.module_(torch.as_tensor(check_matrix(X, "X"))).codes.numpy()

    def inverse_transform(self, codes) -> np.ndarray:
        check_is_fitted(self, "module_")
        with torch.no_grad():
            return self.module_.decode(torch.as_tensor(np.asarray(codes), dtype=torch.long)).numpy()

    def residual_norms(self, X) -> np.ndarray:
        """L2 norm of the running residual before stage 1 and after every stage."""
        check_is_fitted(self, "module_")
        with torch.no_grad():
            x = torch.as_tensor(check_matrix(X, "X"))
            enc = self.module_(x)
            norms = [x.norm(dim=-1)]
            r = x
            for t in enc.terms:
                r = r - t
                norms.append(r.norm(dim=-1))
        return torch.stack(norms, dim=-1).numpy()
