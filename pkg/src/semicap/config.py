"""Flat ``key = value`` run configuration covering data, model, losses and training."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .data import GenConfig
from .losses import LossWeights
from .trainer import TrainConfig

_SECTION = "run"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything needed to rebuild a run: benchmark, split, model sizes and training."""

    # benchmark
    num_concepts: int = 40
    attributes_per_concept: int = 3
    attribute_vocab: int = 24
    samples_per_concept: int = 125
    image_dim: int = 32
    noise_sigma: float = 0.1
    data_seed: int = 0
    # split
    paired_fraction: float = 0.01
    test_fraction: float = 0.1
    # model
    latent_dim: int = 64
    embed_dim: int = 32
    lstm_hidden: int = 64
    disc_hidden: int = 64
    # training
    train: TrainConfig = field(default_factory=TrainConfig)

    def gen_config(self) -> GenConfig:
        return GenConfig(self.num_concepts, self.attributes_per_concept, self.attribute_vocab,
                         self.samples_per_concept, self.image_dim, self.noise_sigma, self.data_seed)

    def model_overrides(self) -> dict:
        return dict(latent_dim=self.latent_dim, embed_dim=self.embed_dim,
                    lstm_hidden=self.lstm_hidden, disc_hidden=self.disc_hidden)

    def with_seed(self, seed: int) -> "RunConfig":
        """Same run with ``seed`` driving data generation, the split and training."""
        return replace(self, data_seed=seed, train=replace(self.train, seed=seed))


def _own_keys() -> dict:
    return {f.name: f.type for f in fields(RunConfig) if f.name != "train"}


def _train_keys() -> dict:
    return {f.name: f.type for f in fields(TrainConfig) if f.name != "weights"}


def _weight_keys() -> dict:
    return {f.name: f.type for f in fields(LossWeights)}


def known_keys() -> list:
    return sorted({**_own_keys(), **_train_keys(), **_weight_keys()})


def _coerce(key: str, kind, raw: str):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None
    return raw


def from_mapping(values: dict, base: Optional[RunConfig] = None) -> RunConfig:
    """Apply string-valued overrides; unknown keys and bad values raise :class:`ConfigError`."""
    base = base or RunConfig()
    unknown = sorted(set(values) - set(known_keys()))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    own, trn, wts = _own_keys(), _train_keys(), _weight_keys()
    own_vals = {k: _coerce(k, own[k], v) for k, v in values.items() if k in own}
    trn_vals = {k: _coerce(k, trn[k], v) for k, v in values.items() if k in trn}
    wt_vals = {k: _coerce(k, wts[k], v) for k, v in values.items() if k in wts}
    try:
        weights = replace(base.train.weights, **wt_vals)
        train = replace(base.train, weights=weights, **trn_vals)
        cfg = replace(base, train=train, **own_vals)
        cfg.gen_config().validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if not 0 < cfg.paired_fraction < 1 or not 0 <= cfg.test_fraction < 1:
        raise ConfigError("paired_fraction must lie in (0, 1) and test_fraction in [0, 1)")
    return cfg


def parse(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from None
    return from_mapping(dict(parser[_SECTION]), base)


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse(text)


def to_mapping(cfg: RunConfig) -> dict:
    out = {k: getattr(cfg, k) for k in _own_keys()}
    out.update({k: getattr(cfg.train, k) for k in _train_keys()})
    out.update({k: getattr(cfg.train.weights, k) for k in _weight_keys()})
    return out


def dumps(cfg: RunConfig) -> str:
    """Resolved config in the same flat format; ``parse(dumps(c)) == c``."""
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                   for k, v in sorted(to_mapping(cfg).items()))
