"""Sample-quality and generator diagnostics.

FID on pluggable feature extractors, an Inception-Score analogue driven by
any probabilistic classifier, the generator Jacobian and its mean log
condition number, and PRD precision/recall curves with F_8 / F_1/8.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
from sklearn.cluster import MiniBatchKMeans

from . import tensor as T
from .layers import Conv2d, Linear
from .optim import AdamState, adam_step
from .tensor import Tensor

FID_JITTER = 1e-10
COND_FLOOR = 1e-12


class ContractError(RuntimeError):
    """A metric was called on inputs that violate its preconditions."""


class ExtractorBuildError(RuntimeError):
    pass


# -- Gaussian statistics and FID -------------------------------------------

@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}


def fit_gaussian(features) -> GaussianStats:
    x = np.asarray(features.data if isinstance(features, Tensor) else features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"fit_gaussian needs an (N >= 2, F) feature matrix, got shape {x.shape}")
    mu = x.mean(axis=0)
    centred = x - mu
    sigma = centred.T @ centred / (x.shape[0] - 1)
    return GaussianStats(mu, (sigma + sigma.T) / 2)


def matrix_sqrt_psd(a) -> np.ndarray:
    """Symmetric square root of a PSD matrix; tiny negative eigenvalues are clamped."""
    a = np.asarray(a, dtype=np.float64)
    a = (a + a.T) / 2
    w, v = np.linalg.eigh(a)
    scale = max(1.0, float(np.abs(w).max())) if w.size else 1.0
    if w.size and w.min() < -1e-8 * scale:
        raise ArithmeticError(f"matrix is not positive semidefinite (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise ValueError(f"feature dimensions differ: {a.mu.shape} vs {b.mu.shape}")
    n = a.mu.shape[0]
    diff = a.mu - b.mu
    root_a = matrix_sqrt_psd(a.sigma + FID_JITTER * np.eye(n))
    cross = matrix_sqrt_psd(root_a @ b.sigma @ root_a)
    value = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.trace(cross)
    return float(value)


def fid_from_features(real, fake) -> float:
    return frechet_distance(fit_gaussian(real), fit_gaussian(fake))


# -- Inception-Score analogue -------------------------------------------------

def inception_score_surrogate(classifier: Callable, samples) -> float:
    """exp(E_x KL(p(y|x) || p(y))) for a classifier returning class probabilities."""
    probs = np.asarray(classifier(samples), dtype=np.float64)
    if probs.ndim != 2:
        raise ContractError(f"classifier must return (N, K) probabilities, got shape {probs.shape}")
    if np.any(probs < -1e-12) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-6):
        raise ContractError("classifier output rows are not probability distributions")
    probs = np.clip(probs, 0.0, None)
    marginal = probs.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * (np.log(probs) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


# -- Jacobian diagnostics ------------------------------------------------------

def generator_jacobian(g: Callable, z, y=None) -> np.ndarray:
    """Exact Jacobian d G(z) / d z via one reverse pass per output component.

    A single latent (d,) gives (out_dim, d); a batch (B, d) gives
    (B, out_dim, d). Batch-norm generators must be in eval mode so samples
    do not interact through batch statistics.
    """
    if getattr(g, "training", False):
        raise ContractError("generator_jacobian needs the generator in eval mode")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zb = z.reshape(1, -1) if single else z
    zt = T.parameter(zb)
    out = g(zt, y) if y is not None else g(zt)
    b = zb.shape[0]
    out = T.reshape(out, (b, -1))
    out_dim = out.shape[1]
    jac = np.empty((b, out_dim, zb.shape[1]))
    for i in range(out_dim):
        seed = np.zeros((b, out_dim))
        seed[:, i] = 1.0
        (gz,) = T.grad(out, [zt], grad_output=seed)
        jac[:, i, :] = gz.data
    return jac[0] if single else jac


class ConditionNumbers(NamedTuple):
    score: float
    log_conds: np.ndarray
    degenerate: bool


def log_condition_numbers(jacobians: np.ndarray) -> ConditionNumbers:
    jacobians = np.asarray(jacobians, dtype=np.float64)
    if jacobians.ndim == 2:
        jacobians = jacobians[None]
    s = np.linalg.svd(jacobians, compute_uv=False)
    s_max = s[:, 0]
    s_min = s[:, -1]
    degenerate = bool(np.any(s_min < COND_FLOOR))
    logs = np.log(np.maximum(s_max, COND_FLOOR) / np.maximum(s_min, COND_FLOOR))
    return ConditionNumbers(float(logs.mean()), logs, degenerate)


def condition_numbers(g: Callable, z_batch, y=None) -> ConditionNumbers:
    z_batch = np.atleast_2d(np.asarray(z_batch, dtype=np.float64))
    if z_batch.shape[0] < 1:
        raise ValueError("need at least one latent vector")
    return log_condition_numbers(generator_jacobian(g, z_batch, y))


def condition_number_score(g: Callable, z_batch, y=None) -> float:
    """Mean over the batch of ln(sigma_max / sigma_min) of the generator Jacobian."""
    return condition_numbers(g, z_batch, y).score


# -- precision / recall distributions ----------------------------------------

@dataclass
class PRDResult:
    slopes: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f8: float
    f_inv8: float

    def to_dict(self) -> dict:
        return {"f8": self.f8, "f_inv8": self.f_inv8}


def prd_slopes(num_angles: int = 1001, epsilon: float = 1e-10) -> np.ndarray:
    angles = np.linspace(epsilon, np.pi / 2 - epsilon, num=num_angles)
    return np.tan(angles)


def _f_beta(precision: np.ndarray, recall: np.ndarray, beta: float) -> np.ndarray:
    num = (1 + beta ** 2) * precision * recall
    den = beta ** 2 * precision + recall
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def prd_from_histograms(ref_dist, eval_dist, num_angles: int = 1001) -> PRDResult:
    """PRD curve of ``eval_dist`` against reference ``ref_dist`` (both histograms)."""
    p = np.asarray(ref_dist, dtype=np.float64)
    q = np.asarray(eval_dist, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("histograms must be 1-D and of equal length")
    slopes = prd_slopes(num_angles)
    precision = np.minimum(p[None, :] * slopes[:, None], q[None, :]).sum(axis=1)
    recall = np.minimum(p[None, :], q[None, :] / slopes[:, None]).sum(axis=1)
    precision = np.clip(precision, 0.0, 1.0)
    recall = np.clip(recall, 0.0, 1.0)
    f8 = float(_f_beta(precision, recall, 8.0).max())
    f_inv8 = float(_f_beta(precision, recall, 1.0 / 8.0).max())
    return PRDResult(slopes, precision, recall, f8, f_inv8)


def cluster_histograms(real, fake, num_clusters: int = 20, seed: int = 0) -> tuple:
    real = np.asarray(real, dtype=np.float64).reshape(len(real), -1)
    fake = np.asarray(fake, dtype=np.float64).reshape(len(fake), -1)
    pooled = np.concatenate([real, fake])
    km = MiniBatchKMeans(n_clusters=num_clusters, n_init=10, random_state=seed)
    labels = km.fit(pooled).labels_
    p = np.bincount(labels[: len(real)], minlength=num_clusters) / len(real)
    q = np.bincount(labels[len(real):], minlength=num_clusters) / len(fake)
    return p, q


def prd_curve(real_features, fake_features, num_clusters: int = 20, num_angles: int = 1001,
              num_runs: int = 10, seed: int = 0) -> PRDResult:
    """PRD of fake against real features, averaged over independent clusterings."""
    real = np.asarray(real_features, dtype=np.float64)
    fake = np.asarray(fake_features, dtype=np.float64)
    if len(real) == 0 or len(fake) == 0:
        raise ValueError("prd_curve needs non-empty real and fake sets")
    if num_clusters > min(len(real), len(fake)):
        raise ValueError(f"num_clusters={num_clusters} exceeds the sample count")
    precisions, recalls = [], []
    for run in range(num_runs):
        p, q = cluster_histograms(real, fake, num_clusters, seed + run)
        res = prd_from_histograms(p, q, num_angles)
        precisions.append(res.precision)
        recalls.append(res.recall)
    precision = np.mean(precisions, axis=0)
    recall = np.mean(recalls, axis=0)
    return PRDResult(prd_slopes(num_angles), precision, recall,
                     float(_f_beta(precision, recall, 8.0).max()),
                     float(_f_beta(precision, recall, 1.0 / 8.0).max()))


# -- feature extractors ----------------------------------------------------------

@dataclass
class FeatureExtractor:
    embed: Callable = field(repr=False)
    descriptor: str
    dim: int
    probs: Optional[Callable] = field(default=None, repr=False)
    accuracy: Optional[float] = None

    def __call__(self, samples) -> np.ndarray:
        return np.asarray(self.embed(samples), dtype=np.float64)


def _identity_extractor(dim: int) -> FeatureExtractor:
    def embed(x):
        x = np.asarray(x, dtype=np.float64)
        return x.reshape(len(x), -1)

    return FeatureExtractor(embed, "identity", dim)


class _Classifier:
    """Small classifier whose penultimate activations serve as features."""

    def __init__(self, sample_shape: tuple, num_classes: int, rng: np.random.Generator,
                 width: int = 32):
        self.image = len(sample_shape) == 3
        if self.image:
            c = sample_shape[2]
            s = sample_shape[0] // 4
            self.c1 = Conv2d(c, 8, 3, rng, stride=2)
            self.c2 = Conv2d(8, 16, 3, rng, stride=2)
            self.fc = Linear(s * s * 16, width, rng)
        else:
            self.l1 = Linear(int(np.prod(sample_shape)), width, rng)
            self.fc = Linear(width, width, rng)
        self.out = Linear(width, num_classes, rng)

    def parameters(self) -> list:
        mods = [self.c1, self.c2, self.fc, self.out] if self.image else [self.l1, self.fc, self.out]
        return [p for m in mods for p in (m.weight, m.bias)]

    def features(self, x) -> Tensor:
        x = T.as_tensor(x)
        if self.image:
            h = T.relu(self.c2(T.relu(self.c1(x))))
            h = T.reshape(h, (h.shape[0], -1))
        else:
            h = T.relu(self.l1(T.reshape(x, (x.shape[0], -1))))
        return T.relu(self.fc(h))

    def logits(self, x) -> Tensor:
        return self.out(self.features(x))


def train_classifier(dataset, seed: int = 0, steps: int = 600, batch_size: int = 64,
                     lr: float = 3e-3) -> tuple:
    """Fit a classifier on ``dataset``; returns (model, held-out accuracy)."""
    rng = np.random.default_rng([seed, 11])
    model = _Classifier(tuple(dataset.sample_shape), dataset.num_classes, rng)
    params = model.parameters()
    opt = AdamState(params, lr=lr, beta1=0.9, beta2=0.999)
    sampler = dataset.sampler(stream=10_000 + seed)
    for _ in range(steps):
        x, y = sampler.sample(batch_size)
        logp = T.log_softmax(model.logits(x))
        onehot = np.eye(dataset.num_classes)[y]
        loss = T.neg(T.mean(T.tsum(T.mul(logp, onehot), axis=1)))
        adam_step(opt, params, T.grad(loss, params))
    with T.no_grad():
        pred = model.logits(dataset.test_x).data.argmax(axis=1)
    return model, float((pred == dataset.test_y).mean())


def make_feature_extractor(kind: str, dataset=None, seed: int = 0, min_accuracy: float = 0.9,
                           steps: int = 600) -> FeatureExtractor:
    """``identity`` (raw coordinates) or ``trained_classifier`` (frozen penultimate layer)."""
    if kind == "identity":
        dim = int(np.prod(dataset.sample_shape)) if dataset is not None else -1
        return _identity_extractor(dim)
    if kind != "trained_classifier":
        raise ValueError(f"unknown feature extractor kind {kind!r}")
    if dataset is None or dataset.test_y is None:
        raise ValueError("trained_classifier needs a labeled dataset")
    model, acc = train_classifier(dataset, seed=seed, steps=steps)
    if acc < min_accuracy:
        raise ExtractorBuildError(
            f"classifier reached {acc:.3f} held-out accuracy, below the {min_accuracy} threshold")

    def embed(x):
        with T.no_grad():
            return model.features(np.asarray(x, dtype=np.float64)).data

    def probs(x):
        with T.no_grad():
            return T.softmax(model.logits(np.asarray(x, dtype=np.float64))).data

    return FeatureExtractor(embed, f"classifier:{dataset.name}", model.fc.weight.shape[1], probs, acc)
