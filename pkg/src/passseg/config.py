"""Experiment configuration files.

A config is a YAML mapping with up to four top-level keys::

    name: desk-A            # run name, used for the output directory
    network:                # NetworkSpec fields
      base_resolution: 64
      base_filters: 4
      depth: 4
    data:                   # where the training set comes from
      domain: A             # benchmark domain preset, or a mapping of DomainSpec fields
      n_samples: 16
      data_seed: 0
    train:                  # TrainConfig fields
      epochs: 30
      batch_size: 4

Every key is optional; unknown keys raise ConfigError naming the key.
``data.data_dir`` replaces the synthetic generator with a folder written by
``export_dataset`` (``images/``, ``masks/``, optional ``split.json``).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .data import Dataset, DomainSpec, benchmark_domains, domain_spec_from_dict, generate_synthetic_domain, \
    load_dataset_dir, make_splits
from .errors import ConfigError
from .nets import NetworkSpec
from .trainer import TrainConfig

TOP_LEVEL = ("name", "network", "data", "train")
# dropout lives on TrainConfig and is copied onto the network spec when building
NETWORK_KEYS = tuple(f.name for f in fields(NetworkSpec) if f.name != "dropout")
TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig))


@dataclass(frozen=True)
class DataConfig:
    domain: Any = "A"
    family: str = "lungs"
    data_dir: str | None = None
    n_samples: int = 16
    data_seed: int = 0
    train_n: int | None = None
    val_n: int = 0
    test_n: int = 0


DATA_KEYS = tuple(f.name for f in fields(DataConfig))


@dataclass(frozen=True)
class RunConfig:
    name: str = "run"
    network: NetworkSpec = field(default_factory=NetworkSpec)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {"name": self.name,
                "network": {k: _plain(getattr(self.network, k)) for k in NETWORK_KEYS},
                "data": {k: _plain(getattr(self.data, k)) for k in DATA_KEYS},
                "train": {k: _plain(getattr(self.train, k)) for k in TRAIN_KEYS}}

    def with_train(self, **changes) -> "RunConfig":
        return replace(self, train=replace(self.train, **changes).validate())


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            # YAML 1.1 reads exponent literals without a dot (1e-8) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{where} must be a list of {len(default)} numbers, got {value!r}")
        return tuple(_coerce(section, key, v, d) for v, d in zip(value, default))
    if isinstance(default, str) and key != "domain":
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    return value


def _section(raw: dict, section: str, allowed, defaults) -> dict:
    values = raw.get(section) or {}
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    out = {}
    for key, value in values.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {section}.{key}")
        out[key] = _coerce(section, key, value, getattr(defaults, key))
    return out


def parse_config(raw: dict | None) -> RunConfig:
    """Validate a decoded config mapping."""
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown config key {key}")
    network = NetworkSpec(**_section(raw, "network", NETWORK_KEYS, NetworkSpec())).validate()
    train = TrainConfig(**_section(raw, "train", TRAIN_KEYS, TrainConfig())).validate()
    data_kw = _section(raw, "data", DATA_KEYS, DataConfig())
    # keys whose default is None are checked here
    if data_kw.get("train_n") is not None and (isinstance(data_kw["train_n"], bool)
                                                or not isinstance(data_kw["train_n"], int)):
        raise ConfigError(f"data.train_n must be an integer, got {data_kw['train_n']!r}")
    if data_kw.get("data_dir") is not None:
        data_kw["data_dir"] = str(data_kw["data_dir"])
    if not isinstance(data_kw.get("domain", "A"), (str, dict)):
        raise ConfigError(f"data.domain must be a preset name or a mapping, got {data_kw['domain']!r}")
    data_cfg = DataConfig(**data_kw)
    name = raw.get("name", "run")
    if not isinstance(name, str) or not name or "/" in name:
        raise ConfigError(f"name must be a non-empty string without '/', got {name!r}")
    cfg = RunConfig(name, network, data_cfg, train)
    domain_spec(cfg)  # validates presets early
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    return parse_config(raw)


def domain_spec(cfg: RunConfig) -> DomainSpec | None:
    """The synthetic domain a config trains on, or None for folder data."""
    if cfg.data.data_dir is not None:
        return None
    res, ch = cfg.network.base_resolution, cfg.network.image_channels
    if isinstance(cfg.data.domain, dict):
        values = {"resolution": res, "channels": ch, "shape_family": cfg.data.family, **cfg.data.domain}
        return domain_spec_from_dict(values)
    presets = benchmark_domains(res, cfg.data.family)
    if cfg.data.domain not in presets:
        raise ConfigError(f"unknown domain preset {cfg.data.domain!r}; choose from {sorted(presets)}")
    return dataclasses.replace(presets[cfg.data.domain], channels=ch).validate()


def build_dataset(cfg: RunConfig) -> Dataset:
    """Materialise the training dataset described by ``cfg.data``."""
    d = cfg.data
    if d.data_dir is not None:
        ds = load_dataset_dir(d.data_dir, cfg.network.base_resolution, cfg.network.image_channels)
    else:
        ds = generate_synthetic_domain(domain_spec(cfg), d.n_samples, seed=d.data_seed)
    if d.train_n is not None:
        ds = make_splits(ds, d.train_n, d.val_n, d.test_n, seed=d.data_seed)
    return ds
