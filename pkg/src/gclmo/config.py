"""Flat ``stage.key = value`` configuration shared by every subcommand.

Precedence: built-in defaults < config file < ``GCLMO_<STAGE>_<KEY>``
environment variables < explicit overrides (CLI flags).
"""

from __future__ import annotations

import os
from dataclasses import fields

from .errors import ConfigError, InputError
from .train import TrainConfig, _coerce

DEFAULTS: dict[str, object] = {
    "datagen.items": 10000,
    "datagen.categories": 20,
    "datagen.queries": 1000,
    "datagen.users": 2000,
    "datagen.days": 14,
    "datagen.eval_days": 1,
    "datagen.page_size": 10,
    "datagen.skew": 1.1,
    "datagen.dim": 16,
    "datagen.relevance_threshold": 0.4,
    "datagen.styles": 6,
    "datagen.style_strength": 1.5,
    "datagen.seed": 0,
    "graph.window_days": 7,
    "index.topk": 100,
    "index.category_restricted": True,
    "eval.k": 0,  # 0 means 1% of the corpus
    "eval.longtail_window": 14,
    "eval.longtail_percentile": 80.0,
    "eval.longtail_threshold": -1.0,  # < 0 means use the percentile
    "pipeline.workdir": "run",
}
for _f in fields(TrainConfig):
    DEFAULTS[f"train.{_f.name}"] = getattr(TrainConfig, _f.name)


class Config(dict):
    def section(self, stage: str) -> dict:
        prefix = stage + "."
        return {k[len(prefix):]: v for k, v in self.items() if k.startswith(prefix)}

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_mapping(self.section("train"))

    def with_seed(self, seed: int) -> "Config":
        out = Config(self)
        out["datagen.seed"] = seed
        out["train.seed"] = seed
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {self[k]}\n" for k in sorted(self))


def _set(cfg: Config, key: str, raw, source: str) -> None:
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r} ({source}); valid keys: {', '.join(sorted(DEFAULTS))}")
    cfg[key] = _coerce(raw, type(DEFAULTS[key]), key)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides: dict | None = None, environ=None) -> Config:
    cfg = Config(DEFAULTS)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise InputError(f"cannot open config: {exc.strerror}", path=path) from exc
        for key, value in parse_config_text(text, str(path)).items():
            _set(cfg, key, value, str(path))
    env = os.environ if environ is None else environ
    for key in DEFAULTS:
        name = "GCLMO_" + key.replace(".", "_").upper()
        if name in env:
            _set(cfg, key, env[name], name)
    for key, value in (overrides or {}).items():
        _set(cfg, key, value, "override")
    cfg.train_config()  # validates the train section early
    return cfg
