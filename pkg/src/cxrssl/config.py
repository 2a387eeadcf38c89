"""Flat, namespaced run configuration (``section.key``) with typed defaults.

Config files are TOML with one table per section::

    [model]
    preset = "vit_tiny_test"

    [train]
    epochs = 30

Unknown keys are rejected. ``--set section.key=value`` overrides are parsed
according to the type of the default.
"""

from __future__ import annotations

import json
from dataclasses import fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backbone import PRESETS, ModelConfig
from .ssl import SSLConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _defaults() -> dict:
    d = {"model.preset": "vit_s16"}
    d.update({f"model.{k}": v for k, v in PRESETS["vit_s16"].to_dict().items()})
    d["ssl.objective"] = "mae"
    d.update({f"ssl.{k}": v for k, v in SSLConfig().to_dict().items()})
    d.update({
        "train.epochs": 200,
        "train.warmup_epochs": 10,
        "train.lr_initial": 5e-4,
        "train.lr_min": 1e-6,
        "train.wd_start": 0.04,
        "train.wd_end": 0.4,
        "train.wd_schedule": "cosine",
        "train.beta1": 0.9,
        "train.beta2": 0.999,
        "train.eps": 1e-8,
        "train.clip_grad": 3.0,
        "train.pretrain_batch_size": 64,
        "train.finetune_batch_size": 48,
        "train.downstream_epochs": 200,
        "train.downstream_warmup_epochs": 10,
        "train.probe_lr_initial": 5e-4,
        "train.probe_wd_start": 0.04,
        "train.probe_wd_end": 0.4,
        "train.seed": 0,
        "data.n_images": 1000,
        "data.positive_fraction": 0.31,
        "data.image_size": 256,
        "data.style": "adult",
        "data.single_image_patients": False,
        "data.id_prefix": "img",
        "data.train_fraction": 0.8,
        "data.strat_keys": "cohort,label,sex,age_bin",
        "data.seed": 0,
        "eval.threshold": 0.5,
        "eval.n_boot": 2000,
        "eval.alpha": 0.05,
        "eval.seed": 0,
    })
    return d


DEFAULTS = _defaults()


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        text = value.strip()
        if isinstance(default, bool):
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        try:
            return int(text) if isinstance(default, int) else float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}") from None
    if isinstance(default, bool) != isinstance(value, bool):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if not isinstance(value, type(default)):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.explicit: dict = {}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.explicit[key] = _coerce(key, value)

    def __getitem__(self, key: str):
        return self.resolved()[key]

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            try:
                raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, tomllib.TOMLDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            for section, table in raw.items():
                if not isinstance(table, dict):
                    raise ConfigError(f"top-level key {section!r} must be a [section]")
                for k, v in table.items():
                    cfg.set(f"{section}.{k}", v)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v)
        return cfg

    def resolved(self) -> dict:
        out = dict(DEFAULTS)
        preset = self.explicit.get("model.preset", DEFAULTS["model.preset"])
        if preset not in PRESETS:
            raise ConfigError(f"unknown model preset {preset!r}; choose from {sorted(PRESETS)}")
        out.update({f"model.{k}": v for k, v in PRESETS[preset].to_dict().items()})
        out.update(self.explicit)
        return out

    def section(self, name: str) -> dict:
        p = name + "."
        return {k[len(p):]: v for k, v in self.resolved().items() if k.startswith(p)}

    def to_json(self) -> str:
        return json.dumps(self.resolved(), indent=2, sort_keys=True)

    # -- typed views ------------------------------------------------------

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        try:
            return ModelConfig(**{k: v for k, v in self.section("model").items() if k in names})
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None

    def ssl_config(self) -> SSLConfig:
        return SSLConfig.from_dict(self.section("ssl"))

    def train_config(self, phase: str) -> TrainConfig:
        t = self.section("train")
        common = {k: t[k] for k in ("lr_min", "wd_schedule", "beta1", "beta2", "eps", "seed")}
        wd = {"wd_start": t["wd_start"], "wd_end": t["wd_end"]}
        try:
            if phase == "pretrain":
                return TrainConfig(phase=phase, objective=self["ssl.objective"],
                                   batch_size=t["pretrain_batch_size"], epochs=t["epochs"],
                                   warmup_epochs=t["warmup_epochs"], lr_initial=t["lr_initial"],
                                   clip_grad=t["clip_grad"], **wd, **common)
            lr = t["lr_initial"]
            if phase == "probe":
                lr = t["probe_lr_initial"]
                wd = {"wd_start": t["probe_wd_start"], "wd_end": t["probe_wd_end"]}
            return TrainConfig(phase=phase, objective="supervised",
                               batch_size=t["finetune_batch_size"], epochs=t["downstream_epochs"],
                               warmup_epochs=t["downstream_warmup_epochs"], lr_initial=lr,
                               clip_grad=0.0, **wd, **common)
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from None
