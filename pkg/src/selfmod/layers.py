"""Normalization and conditioning layers.

Batch norm, self-modulated batch norm (scale and shift produced from the
latent vector by small MLPs), label-conditional batch norm, latent/label
composition, spectral normalization, the gradient penalty, and the
projection discriminator head.
"""

from __future__ import annotations

from typing import Callable, Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, parameter

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
MODULATOR_HIDDEN = 32
MODULATOR_INIT_STD = 0.02


class Module:
    """Minimal container: walks attributes to find parameters and sub-modules."""

    training = True

    def _children(self) -> Iterator[tuple]:
        for name, value in vars(self).items():
            if isinstance(value, (Module, Tensor)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Module, Tensor)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)
        if getattr(self, "sn", None) is not None:
            yield f"{prefix}sn.u", self.sn.u
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict:
        state = {f"param:{k}": v.data.copy() for k, v in self.named_parameters()}
        state.update({f"buffer:{k}": np.array(v, copy=True) for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict) -> None:
        for k, p in self.named_parameters():
            arr = np.asarray(state[f"param:{k}"], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()
        for k, _ in self.named_buffers():
            owner, attr = self._resolve(k)
            setattr(owner, attr, np.array(state[f"buffer:{k}"], dtype=np.float64))

    def _resolve(self, dotted: str) -> tuple:
        parts = dotted.split(".")
        obj = self
        for part in parts[:-1]:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        return obj, parts[-1]


# -- batch normalization ------------------------------------------------------

class BatchNormLayer(Module):
    """Per-channel batch norm over every axis but the last."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM,
                 affine: bool = True):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = parameter(np.ones(channels)) if affine else None
        self.beta = parameter(np.zeros(channels)) if affine else None
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def normalize(self, h: Tensor, mode: Optional[str] = None) -> Tensor:
        """(h - mu) / sqrt(var + eps) with batch or running statistics."""
        h = T.as_tensor(h)
        if h.ndim < 2 or h.shape[-1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels in last axis, got shape {h.shape}")
        mode = mode or ("train" if self.training else "eval")
        if mode == "train":
            mu, var = T.batch_moments(h, tuple(range(h.ndim - 1)))
            m = self.momentum
            self.running_mean = m * self.running_mean + (1 - m) * mu.data.reshape(-1)
            self.running_var = m * self.running_var + (1 - m) * var.data.reshape(-1)
        elif mode == "eval":
            mu = Tensor(self.running_mean)
            var = Tensor(self.running_var)
        else:
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        return T.div(T.sub(h, mu), T.sqrt(T.add(var, self.eps)))

    def __call__(self, h: Tensor, mode: Optional[str] = None) -> Tensor:
        return bn_forward(self, h, mode)


def _per_sample(v: Tensor, ndim: int) -> Tensor:
    """(N, C) -> (N, 1, ..., 1, C) so it broadcasts against an ndim-d activation."""
    n, c = v.shape
    return T.reshape(v, (n,) + (1,) * (ndim - 2) + (c,))


def bn_forward(layer: BatchNormLayer, h, mode: Optional[str] = None) -> Tensor:
    xhat = layer.normalize(h, mode)
    return T.add(T.mul(xhat, layer.gamma), layer.beta)


# -- self-modulation ------------------------------------------------------------

class SelfModulator(Module):
    """One-hidden-layer ReLU MLP mapping the latent vector to per-channel values.

    The output carries a trainable per-channel offset initialised to
    ``output_offset``; with ``out_weight`` starting at zero the modulator initially
    returns exactly that constant.
    """

    def __init__(self, latent_dim: int, channels: int, hidden: int = MODULATOR_HIDDEN,
                 output_offset: float = 0.0, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.latent_dim = latent_dim
        self.channels = channels
        self.hidden_weight = parameter(rng.normal(0.0, MODULATOR_INIT_STD, (hidden, latent_dim)))
        self.hidden_bias = parameter(np.zeros(hidden))
        self.out_weight = parameter(np.zeros((channels, hidden)))
        self.offset = parameter(np.full(channels, float(output_offset)))

    def __call__(self, z) -> Tensor:
        return modulation_mlp(self, z)


def modulation_mlp(mod: SelfModulator, z) -> Tensor:
    """out_weight @ relu(hidden_weight @ z + hidden_bias) + offset; accepts a single z of shape (d,) or a batch (N, d)."""
    z = T.as_tensor(z)
    single = z.ndim == 1
    if single:
        z = T.reshape(z, (1, z.shape[0]))
    if z.ndim != 2 or z.shape[1] != mod.latent_dim:
        raise ShapeError(f"modulator expects latent dim {mod.latent_dim}, got shape {z.shape}")
    hidden = T.relu(T.add(T.matmul(z, T.transpose(mod.hidden_weight)), mod.hidden_bias))
    out = T.add(T.matmul(hidden, T.transpose(mod.out_weight)), mod.offset)
    return T.reshape(out, (mod.channels,)) if single else out


class SelfModulatedBN(Module):
    """Batch norm whose scale and shift are functions of the latent vector."""

    def __init__(self, channels: int, latent_dim: int, hidden: int = MODULATOR_HIDDEN,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stats = BatchNormLayer(channels, affine=False)
        self.gamma_mod = SelfModulator(latent_dim, channels, hidden, 1.0, rng)
        self.beta_mod = SelfModulator(latent_dim, channels, hidden, 0.0, rng)

    def __call__(self, h, z, mode: Optional[str] = None) -> Tensor:
        return sbn_forward(self.stats, self.gamma_mod, self.beta_mod, h, z, mode)


def sbn_forward(stats: BatchNormLayer, gamma_mod: SelfModulator, beta_mod: SelfModulator,
                h, z, mode: Optional[str] = None) -> Tensor:
    h, z = T.as_tensor(h), T.as_tensor(z)
    if z.ndim != 2 or z.shape[0] != h.shape[0]:
        raise ShapeError(f"need one latent row per batch element: h {h.shape}, z {z.shape}")
    xhat = stats.normalize(h, mode)
    gamma = _per_sample(gamma_mod(z), h.ndim)
    beta = _per_sample(beta_mod(z), h.ndim)
    return T.add(T.mul(xhat, gamma), beta)


# -- label conditioning -----------------------------------------------------------

def _check_labels(y, num_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes}), got {y.min()}..{y.max()}")
    return y


class ConditionalBNLayer(Module):
    def __init__(self, channels: int, num_classes: int):
        self.stats = BatchNormLayer(channels, affine=False)
        self.num_classes = num_classes
        self.gamma_table = parameter(np.ones((num_classes, channels)))
        self.beta_table = parameter(np.zeros((num_classes, channels)))

    def __call__(self, h, y, mode: Optional[str] = None) -> Tensor:
        return cbn_forward(self, h, y, mode)


def cbn_forward(layer: ConditionalBNLayer, h, y, mode: Optional[str] = None) -> Tensor:
    h = T.as_tensor(h)
    y = _check_labels(y, layer.num_classes)
    if y.shape[0] != h.shape[0]:
        raise ShapeError(f"need one label per batch element: h {h.shape}, labels {y.shape}")
    xhat = layer.stats.normalize(h, mode)
    gamma = _per_sample(T.take_rows(layer.gamma_table, y), h.ndim)
    beta = _per_sample(T.take_rows(layer.beta_table, y), h.ndim)
    return T.add(T.mul(xhat, gamma), beta)


class LatentComposer(Module):
    """z + shift_table[y] + z * scale_table[y]; both tables start at zero."""

    def __init__(self, num_classes: int, latent_dim: int):
        self.num_classes = num_classes
        self.shift_table = parameter(np.zeros((num_classes, latent_dim)))
        self.scale_table = parameter(np.zeros((num_classes, latent_dim)))

    def __call__(self, z, y) -> Tensor:
        return compose_latent(self, z, y)


def compose_latent(comp: LatentComposer, z, y) -> Tensor:
    z = T.as_tensor(z)
    single = z.ndim == 1
    labels = _check_labels(y, comp.num_classes)
    if single:
        z = T.reshape(z, (1, z.shape[0]))
    if z.shape[1] != comp.shift_table.shape[1] or labels.shape[0] != z.shape[0]:
        raise ShapeError(f"latent {z.shape} incompatible with labels {labels.shape}")
    shift = T.take_rows(comp.shift_table, labels)
    scale = T.take_rows(comp.scale_table, labels)
    out = T.add(T.add(z, shift), T.mul(z, scale))
    return T.reshape(out, (out.shape[1],)) if single else out


# -- spectral normalization ----------------------------------------------------

class SpectralNormState:
    """Persistent left singular vector estimate for one weight matrix."""

    def __init__(self, rows: int, power_iterations_per_step: int = 1,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        u = rng.normal(size=rows)
        self.u = u / np.linalg.norm(u)
        self.power_iterations_per_step = power_iterations_per_step


def power_iterate(w: np.ndarray, state: SpectralNormState, iterations: int) -> Optional[np.ndarray]:
    """Advance ``state.u``; returns the matching right vector, or None for a zero matrix."""
    u = state.u
    v = None
    for _ in range(iterations):
        v = w.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return None
        v = v / nv
        wu = w @ v
        nu = np.linalg.norm(wu)
        if nu == 0.0:
            return None
        u = wu / nu
    if v is None:
        v = w.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return None
        v = v / nv
    state.u = u
    return v


def spectral_normalize(weight, state: SpectralNormState, update: bool = True,
                       iterations: Optional[int] = None) -> Tensor:
    """Divide a 2-D weight (rows = output features) by its estimated top singular value.

    The estimate sigma = u^T W v is differentiable in W with u, v held fixed.
    """
    weight = T.as_tensor(weight)
    if weight.ndim != 2 or weight.shape[0] != state.u.shape[0]:
        raise ShapeError(f"weight {weight.shape} does not match state of size {state.u.shape[0]}")
    w = weight.data
    if not np.any(w):
        return T.mul(weight, 0.0)
    n_iter = state.power_iterations_per_step if iterations is None else iterations
    if update:
        v = power_iterate(w, state, n_iter)
    else:
        v = w.T @ state.u
        norm = np.linalg.norm(v)
        v = v / norm if norm > 0 else None
    if v is None:
        return T.mul(weight, 0.0)
    sigma = T.tsum(T.mul(T.matmul(weight, Tensor(v.reshape(-1, 1))), Tensor(state.u.reshape(-1, 1))))
    return T.div(weight, sigma)


def estimated_sigma(weight: np.ndarray, state: SpectralNormState) -> float:
    v = weight.T @ state.u
    nv = np.linalg.norm(v)
    return 0.0 if nv == 0 else float(state.u @ weight @ (v / nv))


class Linear(Module):
    """Dense layer x @ W + b, optionally spectrally normalized."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator,
                 spectral: bool = False, bias: bool = True, gain: float = 1.0):
        std = gain * np.sqrt(2.0 / (fan_in + fan_out))
        self.weight = parameter(rng.normal(0.0, std, (fan_in, fan_out)))
        self.bias = parameter(np.zeros(fan_out)) if bias else None
        self.sn = SpectralNormState(fan_out, rng=rng) if spectral else None

    def effective_weight(self, update_sn: bool = False) -> Tensor:
        if self.sn is None:
            return self.weight
        return T.transpose(spectral_normalize(T.transpose(self.weight), self.sn, update_sn))

    def __call__(self, x, update_sn: bool = False) -> Tensor:
        out = T.matmul(x, self.effective_weight(update_sn))
        return out if self.bias is None else T.add(out, self.bias)


class Conv2d(Module):
    """NHWC convolution with a (kh, kw, C, C') kernel, optionally spectrally normalized."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: str = "same", spectral: bool = False,
                 bias: bool = True, gain: float = 1.0):
        fan_in, fan_out = kernel * kernel * cin, kernel * kernel * cout
        std = gain * np.sqrt(2.0 / (fan_in + fan_out))
        self.weight = parameter(rng.normal(0.0, std, (kernel, kernel, cin, cout)))
        self.bias = parameter(np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = padding
        self.sn = SpectralNormState(cout, rng=rng) if spectral else None

    def effective_weight(self, update_sn: bool = False) -> Tensor:
        if self.sn is None:
            return self.weight
        shape = self.weight.shape
        flat = T.transpose(T.reshape(self.weight, (-1, shape[3])))
        normed = spectral_normalize(flat, self.sn, update_sn)
        return T.reshape(T.transpose(normed), shape)

    def __call__(self, x, update_sn: bool = False) -> Tensor:
        out = T.conv2d(x, self.effective_weight(update_sn), self.stride, self.padding)
        return out if self.bias is None else T.add(out, self.bias)


def spectral_states(module: Module) -> list:
    return [m.sn for m in module.modules() if getattr(m, "sn", None) is not None]


# -- discriminator regularizers and heads ---------------------------------------

def gradient_penalty(discriminator: Callable, real_batch, fake_batch, lam: float,
                     rng: Optional[np.random.Generator] = None,
                     alpha: Optional[np.ndarray] = None) -> Tensor:
    """lam * mean((||grad_x D(x_hat)||_2 - 1)^2) at random real/fake interpolates.

    ``discriminator`` maps a batch to one logit per sample. The result is
    differentiable w.r.t. the discriminator's parameters.
    """
    real, fake = T.as_tensor(real_batch), T.as_tensor(fake_batch)
    if real.shape != fake.shape:
        raise ShapeError(f"real {real.shape} and fake {fake.shape} batches differ in shape")
    n = real.shape[0]
    if alpha is None:
        rng = rng if rng is not None else np.random.default_rng()
        alpha = rng.uniform(0.0, 1.0, size=n)
    alpha = np.asarray(alpha, dtype=np.float64).reshape((n,) + (1,) * (real.ndim - 1))
    x_hat = T.parameter(alpha * real.data + (1.0 - alpha) * fake.data)
    logits = discriminator(x_hat)
    (g,) = T.grad(T.tsum(logits), [x_hat], create_graph=True)
    axes = tuple(range(1, g.ndim))
    norms = T.sqrt(T.add(T.tsum(T.square(g), axis=axes), 1e-12))
    return T.mul(lam, T.mean(T.square(T.sub(norms, 1.0))))


class ProjectionHead(Module):
    """Linear score of the features plus, given labels, their dot product with a label embedding."""

    def __init__(self, features: int, num_classes: int, rng: Optional[np.random.Generator] = None,
                 projection: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.score_weights = parameter(rng.normal(0.0, np.sqrt(1.0 / features), features))
        self.score_bias = parameter(np.zeros(1))
        self.num_classes = num_classes
        self.label_embedding = (parameter(rng.normal(0.0, 0.02, (num_classes, features)))
                                if projection else None)

    def __call__(self, feats, y=None) -> Tensor:
        return projection_logit(self, feats, y)


def projection_logit(head: ProjectionHead, feats, y=None, score_weights: Optional[Tensor] = None) -> Tensor:
    """Per-sample logits for features of shape (N, F); a single (F,) vector gives a scalar.

    ``score_weights`` overrides the head's own weights (used for the
    spectrally normalized copy).
    """
    feats = T.as_tensor(feats)
    single = feats.ndim == 1
    if single:
        feats = T.reshape(feats, (1, feats.shape[0]))
    w = T.reshape(head.score_weights if score_weights is None else score_weights, (-1, 1))
    logit = T.add(T.reshape(T.matmul(feats, w), (feats.shape[0],)),
                  head.score_bias)
    if head.label_embedding is not None and y is not None:
        labels = _check_labels(y, head.num_classes)
        if labels.shape[0] != feats.shape[0]:
            raise ShapeError(f"need one label per feature row: {feats.shape} vs {labels.shape}")
        emb = T.take_rows(head.label_embedding, labels)
        logit = T.add(logit, T.tsum(T.mul(feats, emb), axis=1))
    return T.reshape(logit, ()) if single else logit
