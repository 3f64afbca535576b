"""Generator and discriminator builders.

Three families share one interface:

* ``dcgan-like``: linear -> reshape -> [BN, ReLU, upsample x2, conv3x3] per
  block -> tanh, channels halving per block; discriminator alternates
  stride-1 3x3 and stride-2 4x4 convolutions with leaky ReLU.
* ``resnet-like``: residual up-blocks (two BN sites each) with an
  upsample + 1x1 conv skip and a final BN/conv; residual down-blocks with
  average pooling and global sum pooling in the discriminator.
* ``mlp``: fully connected stacks for low-dimensional vector data.

Every BN site is plain BN, self-modulated BN or label-conditional BN
according to the :class:`ModulationSpec`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .layers import (
    BatchNormLayer,
    ConditionalBNLayer,
    Conv2d,
    LatentComposer,
    Linear,
    Module,
    ProjectionHead,
    SelfModulatedBN,
    SpectralNormState,
    MODULATOR_HIDDEN,
    projection_logit,
    spectral_normalize,
)

FAMILIES = ("dcgan-like", "resnet-like", "mlp")
KINDS = ("none", "self", "conditional", "self_plus_conditional")


class ConfigError(ValueError):
    """Inconsistent architecture or experiment configuration."""


@dataclass
class ModulationSpec:
    kind: str = "none"
    layer_mask: Optional[list] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"modulation kind must be one of {KINDS}, got {self.kind!r}")
        if self.layer_mask is not None:
            self.layer_mask = [bool(b) for b in self.layer_mask]


@dataclass
class ArchSpec:
    family: str = "dcgan-like"
    latent_dim: int = 16
    base_channels: int = 16
    num_blocks: int = 2
    output_shape: tuple = (16, 16, 1)
    modulation: ModulationSpec = field(default_factory=ModulationSpec)
    num_classes: int = 1
    modulator_hidden: int = MODULATOR_HIDDEN

    def __post_init__(self):
        if isinstance(self.modulation, dict):
            self.modulation = ModulationSpec(**self.modulation)
        self.output_shape = tuple(int(s) for s in self.output_shape)
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.family == "mlp":
            if len(self.output_shape) != 1:
                raise ConfigError(f"mlp family produces vectors, got output_shape {self.output_shape}")
        else:
            if len(self.output_shape) != 3 or self.output_shape[0] != self.output_shape[1]:
                raise ConfigError(f"conv families need square HxWxC output, got {self.output_shape}")
            factor = 2 ** self.num_blocks
            if self.output_shape[0] % factor:
                raise ConfigError(
                    f"output size {self.output_shape[0]} is not start size x 2^{self.num_blocks}")

    @property
    def start_size(self) -> int:
        return self.output_shape[0] // 2 ** self.num_blocks

    @property
    def conditional(self) -> bool:
        return self.modulation.kind in ("conditional", "self_plus_conditional")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["output_shape"] = list(self.output_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(**d)


def _streams(seed: int, n: int) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


class NormSite(Module):
    """One BN position in a generator; dispatches to BN, sBN or cBN."""

    def __init__(self, kind: str, channels: int, latent_dim: int, num_classes: int,
                 hidden: int, rng: np.random.Generator):
        self.kind = kind
        if kind == "self":
            self.layer = SelfModulatedBN(channels, latent_dim, hidden, rng)
        elif kind == "conditional":
            self.layer = ConditionalBNLayer(channels, num_classes)
        else:
            self.layer = BatchNormLayer(channels)

    @property
    def modulated(self) -> bool:
        return self.kind != "plain"

    def __call__(self, h, z, y):
        if self.kind == "self":
            return self.layer(h, z)
        if self.kind == "conditional":
            return self.layer(h, y)
        return self.layer(h)


class Generator(Module):
    def __init__(self, spec: ArchSpec, seed: int = 0):
        self.spec = spec
        core, mods = _streams(seed, 2)
        n_sites = bn_site_count(spec)
        mask = spec.modulation.layer_mask
        if mask is None:
            mask = [True] * n_sites
        if len(mask) != n_sites:
            raise ConfigError(f"layer_mask has {len(mask)} entries but the generator has {n_sites} BN layers")
        site_kind = {"none": "plain", "self": "self", "conditional": "conditional",
                     "self_plus_conditional": "self"}[spec.modulation.kind]
        kinds = [site_kind if m else "plain" for m in mask]
        self.composer = (LatentComposer(spec.num_classes, spec.latent_dim)
                         if spec.modulation.kind == "self_plus_conditional" else None)

        def site(i, channels):
            return NormSite(kinds[i], channels, spec.latent_dim, spec.num_classes,
                            spec.modulator_hidden, mods)

        d, base, nb = spec.latent_dim, spec.base_channels, spec.num_blocks
        self.trace: list = []
        if spec.family == "mlp":
            self.hidden = [Linear(d if i == 0 else base, base, core) for i in range(nb)]
            self.sites = [site(i, base) for i in range(nb)]
            self.out = Linear(base, spec.output_shape[0], core)
        elif spec.family == "dcgan-like":
            s0, c_out = spec.start_size, spec.output_shape[2]
            widths = [base * 2 ** (nb - 1 - i) for i in range(nb)] + [c_out]
            self.fc = Linear(d, s0 * s0 * widths[0], core)
            self.sites = [site(i, widths[i]) for i in range(nb)]
            self.convs = [Conv2d(widths[i], widths[i + 1], 3, core) for i in range(nb)]
        else:
            s0, c_out = spec.start_size, spec.output_shape[2]
            self.fc = Linear(d, s0 * s0 * base, core)
            self.sites = [site(i, base) for i in range(2 * nb + 1)]
            self.convs = [Conv2d(base, base, 3, core) for _ in range(2 * nb)]
            self.skips = [Conv2d(base, base, 1, core) for _ in range(nb)]
            self.final = Conv2d(base, c_out, 3, core)

    def __call__(self, z, y=None) -> T.Tensor:
        spec = self.spec
        z = T.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != spec.latent_dim:
            raise ConfigError(f"expected latent batch (N, {spec.latent_dim}), got {z.shape}")
        if spec.conditional:
            if y is None:
                raise ConfigError("label-conditional generator needs labels")
            if self.composer is not None:
                z = self.composer(z, y)
        n = z.shape[0]
        trace = []
        if spec.family == "mlp":
            h = z
            for lin, s in zip(self.hidden, self.sites):
                h = T.relu(s(lin(h), z, y))
            h = self.out(h)
        elif spec.family == "dcgan-like":
            s0 = spec.start_size
            h = T.reshape(self.fc(z), (n, s0, s0, -1))
            trace.append(h.shape[1])
            for s, conv in zip(self.sites, self.convs):
                h = conv(T.upsample_nearest(T.relu(s(h, z, y)), 2))
                trace.append(h.shape[1])
        else:
            s0 = spec.start_size
            h = T.reshape(self.fc(z), (n, s0, s0, -1))
            trace.append(h.shape[1])
            for i in range(spec.num_blocks):
                a = T.upsample_nearest(T.relu(self.sites[2 * i](h, z, y)), 2)
                a = self.convs[2 * i](a)
                a = self.convs[2 * i + 1](T.relu(self.sites[2 * i + 1](a, z, y)))
                h = T.add(a, self.skips[i](T.upsample_nearest(h, 2)))
                trace.append(h.shape[1])
            h = self.final(T.relu(self.sites[-1](h, z, y)))
        self.trace = trace
        return T.tanh(h)

    @property
    def output_dim(self) -> int:
        return int(np.prod(self.spec.output_shape))


class Discriminator(Module):
    def __init__(self, spec: ArchSpec, projection: bool = False, spectral: bool = True,
                 seed: int = 0):
        self.spec = spec
        self.spectral = spectral
        (rng,) = _streams(seed + 7919, 1)
        base, nb = spec.base_channels, spec.num_blocks
        sn = spectral
        if spec.family == "mlp":
            d_in = spec.output_shape[0]
            self.layers = [Linear(d_in if i == 0 else base, base, rng, spectral=sn) for i in range(nb)]
            self.feature_dim = base
        elif spec.family == "dcgan-like":
            c_in = spec.output_shape[2]
            self.stem = Conv2d(c_in, base, 3, rng, spectral=sn)
            layers = []
            c = base
            for _ in range(nb):
                layers.append(Conv2d(c, 2 * c, 4, rng, stride=2, spectral=sn))
                layers.append(Conv2d(2 * c, 2 * c, 3, rng, spectral=sn))
                c *= 2
            self.layers = layers
            self.feature_dim = spec.start_size ** 2 * c
        else:
            c_in = spec.output_shape[2]
            self.convs = []
            self.skips = []
            for i in range(nb + 1):
                cin = c_in if i == 0 else base
                self.convs.append(Conv2d(cin, base, 3, rng, spectral=sn))
                self.convs.append(Conv2d(base, base, 3, rng, spectral=sn))
                self.skips.append(Conv2d(cin, base, 1, rng, spectral=sn) if i < nb else None)
            self.feature_dim = base
        self.head = ProjectionHead(self.feature_dim, spec.num_classes, rng, projection=projection)
        self.head_sn = SpectralNormState(1, rng=rng) if sn else None

    @property
    def projection(self) -> bool:
        return self.head.label_embedding is not None

    def features(self, x, update_sn: bool = False) -> T.Tensor:
        spec = self.spec
        x = T.as_tensor(x)
        if tuple(x.shape[1:]) != spec.output_shape:
            raise ConfigError(f"discriminator expects samples of shape {spec.output_shape}, got {x.shape[1:]}")
        u = update_sn
        if spec.family == "mlp":
            h = x
            for lin in self.layers:
                h = T.leaky_relu(lin(h, u))
            return h
        if spec.family == "dcgan-like":
            h = T.leaky_relu(self.stem(x, u))
            for conv in self.layers:
                h = T.leaky_relu(conv(h, u))
            return T.reshape(h, (h.shape[0], -1))
        h = x
        for i in range(spec.num_blocks + 1):
            c1, c2, skip = self.convs[2 * i], self.convs[2 * i + 1], self.skips[i]
            a = c1(h if i == 0 else T.relu(h), u)
            a = c2(T.relu(a), u)
            if skip is not None:
                a = T.avg_pool2(a)
                sc = skip(T.avg_pool2(h), u) if i == 0 else T.avg_pool2(skip(h, u))
            else:
                sc = h
            h = T.add(a, sc)
        return T.global_sum_pool(T.relu(h))

    def __call__(self, x, y=None, update_sn: bool = False) -> T.Tensor:
        feats = self.features(x, update_sn)
        if self.head_sn is None:
            return projection_logit(self.head, feats, y)
        # the score weights form a 1 x F map and is normalised like every other layer
        w = spectral_normalize(T.reshape(self.head.score_weights, (1, -1)), self.head_sn, update_sn)
        return projection_logit(self.head, feats, y, score_weights=w)


def bn_site_count(spec: ArchSpec) -> int:
    if spec.family == "resnet-like":
        return 2 * spec.num_blocks + 1
    return spec.num_blocks


def build_generator(spec: ArchSpec, seed: int = 0) -> Generator:
    return Generator(spec, seed)


def build_discriminator(spec: ArchSpec, projection: bool = False, spectral: bool = True,
                        seed: int = 0, input_shape: Optional[tuple] = None) -> Discriminator:
    if input_shape is not None and tuple(input_shape) != spec.output_shape:
        raise ConfigError(f"discriminator input {tuple(input_shape)} does not match generator output {spec.output_shape}")
    return Discriminator(spec, projection, spectral, seed)


def count_modulated_layers(g: Generator) -> int:
    return sum(1 for s in g.sites if s.modulated)


def modulation_parameter_overhead(g: Generator) -> int:
    """Extra parameters of sBN sites relative to plain BN, in closed form."""
    d, h = g.spec.latent_dim, g.spec.modulator_hidden
    return sum(2 * (h * d + h + s.layer.stats.channels * h)
               for s in g.sites if s.kind == "self")
