"""Flat ``key=value`` configuration files with ``--key=value`` overrides.

One namespace covers training, architecture, dataset and grid keys. Values
stay strings until a consumer asks for a typed view, so a single file can
drive ``train``, ``grid`` and ``ablate`` alike.
"""

from __future__ import annotations

from dataclasses import fields
from typing import Callable, Iterable, Optional

from .architectures import ArchSpec, ConfigError, ModulationSpec
from .data import Dataset, make_dataset
from .harness import CONDITIONINGS, GridSpec
from .train import TrainConfig


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _list(item: Callable) -> Callable:
    return lambda text: [item(p.strip()) for p in text.split(",") if p.strip()]


def _optimizer(text: str) -> list:
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"optimizer setting must be beta1:beta2:disc_iters, got {text!r}")
    return [float(parts[0]), float(parts[1]), int(parts[2])]


_TRAIN_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_SCALARS = {"int": int, "float": float, "str": str, "bool": parse_bool}

KEYS: dict = {name: _SCALARS[t] for name, t in _TRAIN_TYPES.items()}
KEYS.update({
    # architecture
    "family": str, "latent_dim": int, "base_channels": int, "num_blocks": int,
    "output_shape": _list(int), "modulation": str, "layer_mask": _list(parse_bool),
    "modulator_hidden": int, "num_classes": int,
    # data and features
    "dataset": str, "data_seed": int, "modes": int, "radius": float, "std": float,
    "size": int, "features": str,
    # grid
    "losses": _list(str), "archs": _list(str), "lipschitz_axes": _list(str),
    "gp_lambdas": _list(float), "optimizers": _list(_optimizer), "conditionings": _list(str),
    "seeds": _list(int), "conditioning": str,
    # io
    "out": str, "workers": int, "model_path": str,
})

_DATASET_KEYS = {"ring": ("modes", "radius", "std"), "shapes": ("size", "num_classes")}


def parse_text(text: str, origin: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        _check_key(key, f"{origin}:{lineno}")
        out[key] = value
    return out


def parse_file(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read(), path)


def parse_overrides(args: Iterable[str]) -> dict:
    """``--key=value`` tokens (underscores or dashes in the key) into a dict."""
    out = {}
    for tok in args:
        if not tok.startswith("--") or "=" not in tok:
            raise ConfigError(f"override must look like --key=value, got {tok!r}")
        key, value = tok[2:].split("=", 1)
        key = key.replace("-", "_")
        _check_key(key, "command line")
        out[key] = value
    return out


def _check_key(key: str, where: str) -> None:
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown key {key!r}")


class Config:
    """String key/values with typed accessors."""

    def __init__(self, values: Optional[dict] = None):
        self.values = {}
        for k, v in (values or {}).items():
            _check_key(k, "config")
            self.values[k] = v

    @classmethod
    def load(cls, path: Optional[str] = None, overrides: Optional[dict] = None) -> "Config":
        values = parse_file(path) if path else {}
        values.update(overrides or {})
        return cls(values)

    def get(self, key: str, default=None):
        if key not in self.values:
            return default
        v = self.values[key]
        if not isinstance(v, str):
            return v
        try:
            return KEYS[key](v)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {v!r} ({exc})") from None

    def __contains__(self, key: str) -> bool:
        return key in self.values

    def dataset(self) -> Dataset:
        name = self.get("dataset", "ring")
        extra = {k: self.get(k) for k in _DATASET_KEYS.get(name, ()) if k in self}
        return make_dataset(name, self.get("data_seed", 0), **extra)

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        kw = {k: self.get(k) for k in _TRAIN_TYPES if k in self}
        if seed is not None:
            kw["seed"] = seed
        if "seed" not in kw:
            raise ConfigError("a seed is required")
        return TrainConfig(**kw)

    def arch_template(self, dataset: Dataset) -> dict:
        """Architecture fields minus family and modulation, shaped for ``dataset``."""
        d = {"output_shape": list(self.get("output_shape", list(dataset.sample_shape))),
             "num_classes": self.get("num_classes", dataset.num_classes)}
        for k in ("latent_dim", "base_channels", "num_blocks", "modulator_hidden"):
            if k in self:
                d[k] = self.get(k)
        return d

    def default_family(self, dataset: Dataset) -> str:
        return self.get("family", "mlp" if len(dataset.sample_shape) == 1 else "dcgan-like")

    def arch_spec(self, dataset: Dataset) -> ArchSpec:
        d = self.arch_template(dataset)
        d["family"] = self.default_family(dataset)
        kind = self.get("modulation")
        if kind is None:
            kind = CONDITIONINGS[self.get("conditioning", "self-mod")]
        d["modulation"] = {"kind": kind, "layer_mask": self.get("layer_mask")}
        ModulationSpec(kind, d["modulation"]["layer_mask"])
        return ArchSpec.from_dict(d)

    def grid_spec(self, dataset: Dataset) -> GridSpec:
        kw = {}
        for key, name in (("losses", "losses"), ("archs", "archs"), ("lipschitz_axes", "lipschitz"),
                          ("gp_lambdas", "gp_lambdas"), ("optimizers", "optimizers"),
                          ("conditionings", "conditionings"), ("seeds", "seeds")):
            if key in self:
                kw[name] = self.get(key)
        if "archs" not in kw and len(dataset.sample_shape) == 1:
            kw["archs"] = ["mlp"]
        return GridSpec(**kw)

    def budget(self) -> dict:
        """Training keys that apply to every grid cell."""
        skip = {"seed", "loss", "lipschitz", "beta1", "beta2", "disc_iters"}
        return {k: self.get(k) for k in _TRAIN_TYPES if k in self and k not in skip}

    def base_cell(self) -> dict:
        lip = self.get("lipschitz", "sn")
        return {"loss": self.get("loss", "hinge"), "arch": self.get("family"), "lipschitz": lip,
                "gp_lambda": self.get("gp_lambda", 10.0) if lip == "gp" else None,
                "beta1": self.get("beta1", 0.0), "beta2": self.get("beta2", 0.9),
                "disc_iters": self.get("disc_iters", 1)}
