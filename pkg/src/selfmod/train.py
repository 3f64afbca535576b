"""Alternating GAN training with metric checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .architectures import ArchSpec, ConfigError, Discriminator, Generator, build_discriminator, build_generator
from .layers import gradient_penalty
from .losses import get_loss
from .metrics import (
    FeatureExtractor,
    condition_numbers,
    fit_gaussian,
    frechet_distance,
    inception_score_surrogate,
    make_feature_extractor,
    prd_curve,
)
from .optim import AdamState, NonFiniteGradientError, adam_step

log = logging.getLogger(__name__)

OPTIMIZER_SETTINGS = ((0.0, 0.9, 1), (0.0, 0.9, 2), (0.5, 0.999, 1))


@dataclass
class TrainConfig:
    seed: int
    loss: str = "hinge"
    lipschitz: str = "sn"
    gp_lambda: float = 10.0
    beta1: float = 0.0
    beta2: float = 0.9
    disc_iters: int = 1
    lr: float = 2e-4
    adam_eps: float = 1e-8
    batch_size: int = 64
    total_steps: int = 1000
    eval_every: int = 500
    eval_samples: int = 2000
    cond_batch: int = 16
    prd_clusters: int = 20
    projection: bool = False

    def __post_init__(self):
        if self.loss not in ("ns", "hinge"):
            raise ConfigError(f"loss must be 'ns' or 'hinge', got {self.loss!r}")
        if self.lipschitz not in ("sn", "gp"):
            raise ConfigError(f"lipschitz must be 'sn' or 'gp', got {self.lipschitz!r}")
        if self.lipschitz == "gp" and self.gp_lambda not in (1.0, 10.0):
            raise ConfigError(f"gradient penalty strength must be 1 or 10, got {self.gp_lambda}")
        if self.disc_iters < 1:
            raise ConfigError("disc_iters must be >= 1")
        if self.eval_every < 1 or self.batch_size < 2 or self.total_steps < 0:
            raise ConfigError("eval_every >= 1, batch_size >= 2 and total_steps >= 0 required")

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]

    def optimizer_key(self) -> tuple:
        return (self.beta1, self.beta2, self.disc_iters)


@dataclass
class RunRecord:
    config: dict
    init: dict = field(default_factory=dict)
    trajectory: list = field(default_factory=list)
    best_fid: Optional[float] = None
    best_step: Optional[int] = None
    best_is: Optional[float] = None
    final_cond_number: Optional[float] = None
    cond_degenerate: bool = False
    prd: Optional[dict] = None
    status: str = "ok"
    failure: Optional[str] = None
    d_updates: int = 0
    g_updates: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))

    def to_dict(self) -> dict:
        return asdict(self)


class MetricsHook:
    """FID / IS / condition number on fixed evaluation latents.

    Holds only frozen data (reference statistics and latents), so one
    instance can serve any number of runs.
    """

    def __init__(self, dataset, extractor: Optional[FeatureExtractor] = None, seed: int = 0,
                 eval_samples: int = 2000, batch_size: int = 64, cond_batch: int = 16,
                 prd_clusters: int = 20):
        self.dataset = dataset
        self.extractor = extractor or make_feature_extractor("identity", dataset)
        self.real_x = dataset.test_x[:eval_samples]
        self.real_features = self.extractor(self.real_x)
        self.real_stats = fit_gaussian(self.real_features)
        self._eval_seed = seed
        self.eval_samples = min(eval_samples, len(self.real_x))
        self.batch_size = batch_size
        self.cond_batch = cond_batch
        self.prd_clusters = prd_clusters

    def _latents(self, g: Generator, n: int, stream: int) -> tuple:
        rng = np.random.default_rng([self._eval_seed, 99, stream])
        z = rng.normal(size=(n, g.spec.latent_dim))
        y = rng.integers(0, g.spec.num_classes, size=n) if g.spec.conditional else None
        return z, y

    def generate(self, g: Generator, n: Optional[int] = None) -> np.ndarray:
        """Samples with batch statistics (as in training); running statistics are left untouched."""
        n = n or self.eval_samples
        z, y = self._latents(g, n, 0)
        saved = [(k, np.array(v, copy=True)) for k, v in g.named_buffers()]
        was_training = g.training
        g.train()
        chunks = []
        with T.no_grad():
            for start in range(0, n, self.batch_size):
                sl = slice(start, start + self.batch_size)
                if n - start < 2:
                    break
                chunks.append(g(z[sl], None if y is None else y[sl]).data)
        for k, v in saved:
            owner, attr = g._resolve(k)
            setattr(owner, attr, v)
        g.train(was_training)
        return np.concatenate(chunks)

    def condition(self, g: Generator):
        z, y = self._latents(g, self.cond_batch, 1)
        was_training = g.training
        g.eval()
        try:
            return condition_numbers(g, z, y)
        finally:
            g.train(was_training)

    def __call__(self, step: int, g: Generator) -> dict:
        fake = self.generate(g)
        if not np.all(np.isfinite(fake)):
            return {"step": step, "fid": None, "is": None, "cond_number": None}
        fid = frechet_distance(self.real_stats, fit_gaussian(self.extractor(fake)))
        is_score = (inception_score_surrogate(self.extractor.probs, fake)
                    if self.extractor.probs is not None else None)
        cond = self.condition(g)
        return {"step": step, "fid": fid, "is": is_score, "cond_number": cond.score,
                "cond_degenerate": cond.degenerate}

    def summarize(self, g: Generator) -> dict:
        fake = self.generate(g)
        prd = prd_curve(self.real_features, self.extractor(fake),
                        num_clusters=min(self.prd_clusters, len(fake)), seed=self._eval_seed)
        return {"prd": prd.to_dict()}


def _finite(x: float) -> bool:
    return bool(np.isfinite(x))


def train_gan(g: Generator, d: Discriminator, data, cfg: TrainConfig,
              metrics_hook: Optional[Callable] = None, config_echo: Optional[dict] = None) -> RunRecord:
    """Alternate ``disc_iters`` discriminator updates with one generator update.

    The record tracks the metric trajectory every ``eval_every`` generator
    steps and the minimum-FID checkpoint. Non-finite losses or gradients end
    the run with status ``diverged``.
    """
    if g.spec.output_shape != d.spec.output_shape:
        raise ConfigError("generator output and discriminator input shapes differ")
    echo = dict(config_echo) if config_echo is not None else {"train": asdict(cfg)}
    record = RunRecord(config=echo)
    loss_d_fn, loss_g_fn = get_loss(cfg.loss)
    streams = np.random.SeedSequence([cfg.seed, 5]).spawn(3)
    z_rng, gp_rng = np.random.default_rng(streams[0]), np.random.default_rng(streams[1])
    sampler = data.sampler(stream=cfg.seed)
    g_params, d_params = g.parameters(), d.parameters()
    g_opt = AdamState(g_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    d_opt = AdamState(d_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    spec = g.spec
    use_gp = cfg.lipschitz == "gp"
    need_labels = spec.conditional or d.projection
    best_state = None
    g.train()
    d.train()

    def evaluate(step):
        nonlocal best_state
        if metrics_hook is None:
            return
        m = metrics_hook(step, g)
        if step == 0:
            record.init = m
            return
        record.trajectory.append(m)
        fid = m.get("fid")
        if fid is not None and (record.best_fid is None or fid < record.best_fid):
            record.best_fid = fid
            record.best_step = step
            record.best_is = m.get("is")
            best_state = g.state_dict()

    def latents(n):
        z = z_rng.normal(size=(n, spec.latent_dim))
        y = z_rng.integers(0, spec.num_classes, size=n) if need_labels else None
        return z, y

    evaluate(0)
    b = cfg.batch_size
    try:
        for step in range(1, cfg.total_steps + 1):
            for _ in range(cfg.disc_iters):
                x_real, y_real = sampler.sample(b)
                z, y_fake = latents(b)
                with T.no_grad():
                    fake = g(z, y_fake)
                yr = y_real if d.projection else None
                real_logits = d(x_real, yr, update_sn=True)
                fake_logits = d(fake, y_fake)
                loss = loss_d_fn(real_logits, fake_logits)
                if use_gp:
                    loss = T.add(loss, gradient_penalty(lambda x: d(x, yr), x_real, fake,
                                                        cfg.gp_lambda, gp_rng))
                if not _finite(loss.item()):
                    raise FloatingPointError(f"non-finite discriminator loss at step {step}")
                adam_step(d_opt, d_params, T.grad(loss, d_params))
                record.d_updates += 1
            z, y_fake = latents(b)
            fake = g(z, y_fake)
            g_loss = loss_g_fn(d(fake, y_fake))
            if not _finite(g_loss.item()):
                raise FloatingPointError(f"non-finite generator loss at step {step}")
            adam_step(g_opt, g_params, T.grad(g_loss, g_params))
            record.g_updates += 1
            if step % cfg.eval_every == 0 or step == cfg.total_steps:
                evaluate(step)
    except (FloatingPointError, NonFiniteGradientError) as exc:
        log.warning("run diverged: %s", exc)
        record.status = "diverged"
        record.failure = str(exc)

    if metrics_hook is not None and best_state is not None and hasattr(metrics_hook, "summarize"):
        current = g.state_dict()
        g.load_state_dict(best_state)
        record.prd = metrics_hook.summarize(g)["prd"]
        cond = metrics_hook.condition(g) if hasattr(metrics_hook, "condition") else None
        if cond is not None:
            record.final_cond_number = cond.score
            record.cond_degenerate = cond.degenerate
        g.load_state_dict(current)
    record._best_state = best_state  # not serialized; used for saving models
    return record


def build_pair(arch: ArchSpec, cfg: TrainConfig) -> tuple:
    g = build_generator(arch, seed=cfg.seed)
    d = build_discriminator(arch, projection=cfg.projection, spectral=cfg.lipschitz == "sn",
                            seed=cfg.seed)
    return g, d


def run_training(arch: ArchSpec, data, cfg: TrainConfig, extractor: Optional[FeatureExtractor] = None,
                 echo_extra: Optional[dict] = None, model_path: Optional[str] = None) -> RunRecord:
    """Build a fresh generator/discriminator pair from ``cfg.seed`` and train it."""
    g, d = build_pair(arch, cfg)
    hook = MetricsHook(data, extractor, seed=cfg.seed, eval_samples=cfg.eval_samples,
                       batch_size=cfg.batch_size, cond_batch=cfg.cond_batch,
                       prd_clusters=cfg.prd_clusters)
    echo = {"train": asdict(cfg), "arch": arch.to_dict(), "dataset": data.describe(),
            "features": hook.extractor.descriptor}
    if echo_extra:
        echo.update(echo_extra)
    record = train_gan(g, d, data, cfg, hook, echo)
    if model_path is not None:
        save_generator(model_path, g, record._best_state)
    return record


def save_generator(path: str, g: Generator, state: Optional[dict] = None) -> None:
    state = state if state is not None else g.state_dict()
    np.savez(path, __spec__=np.array(json.dumps(g.spec.to_dict())), **state)


def load_generator(path: str) -> Generator:
    with np.load(path, allow_pickle=False) as z:
        spec = ArchSpec.from_dict(json.loads(str(z["__spec__"])))
        g = build_generator(spec)
        g.load_state_dict({k: z[k] for k in z.files if k != "__spec__"})
    return g
