"""Flat ``key = value`` run configuration.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Unknown keys are rejected so typos never silently fall back to defaults.
Keys ending in ``.dir``/``_dir`` or ``.path`` are resolved relative to the
config file's directory.
"""
from __future__ import annotations

import os
from pathlib import Path
from typing import Iterable, Mapping

DEFAULTS: dict[str, str] = {
    "dataset.n": "550",
    "dataset.n_test": "50",
    "dataset.side": "16",
    "dataset.seed": "0",
    "dataset.jitter": "0.1",
    "goal.kind": "image",
    "goal.sprite_seed": "0",
    "goal.style": "grayscale",
    "goal.src": "circle",
    "goal.dst": "cross",
    "visual.kind": "badnet",
    "text.kind": "none",
    "text.placement": "default",
    "poison.rate": "0.1",
    "poison.neg_rate": "0.05",
    "poison.adversarial": "false",
    "poison.lambda": "1.0",
    "poison.seed": "0",
    "train.steps": "3000",
    "train.batch": "16",
    "train.lr": "0.002",
    "train.T": "50",
    "train.beta_min": "0.0001",
    "train.beta_max": "0.02",
    "train.clip": "1.0",
    "train.hidden": "16",
    "train.seed": "0",
    "eval.margin": "0.0",
    "eval.seed": "0",
    "sweep.methods": "badnet,word,badnet+word",
    "sweep.rates": "0.01,0.02,0.06,0.10",
    "sweep.steps": "0,100,250,500,1000,2000,3000",
    "table.methods": "badnet,blend,wanet,refool,color,badt2i,mark,word,badnet+word",
    "table.goals": "image,style,object",
    "output.dir": "out",
    "cache.dir": "",
}

# per-kind visual trigger parameters, e.g. ``visual.alpha`` for blend
VISUAL_PARAM_KEYS = (
    "visual.patch_frac",
    "visual.corner",
    "visual.pattern_seed",
    "visual.cell",
    "visual.alpha",
    "visual.grid_k",
    "visual.strength",
    "visual.seed",
    "visual.beta",
    "visual.blur_radius",
    "visual.reflection_seed",
    "visual.n_blobs",
    "visual.dr",
    "visual.dg",
    "visual.db",
)
KNOWN_KEYS = frozenset(DEFAULTS) | frozenset(VISUAL_PARAM_KEYS)
PATH_SUFFIXES = (".dir", ".path")


class ConfigError(ValueError):
    pass


class RunConfig(dict):
    """``dict`` of raw string values with typed accessors."""

    base_dir: Path = Path(".")

    def int(self, key: str) -> int:
        return int(self._get(key))

    def float(self, key: str) -> float:
        return float(self._get(key))

    def bool(self, key: str) -> bool:
        raw = self._get(key).strip().lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")

    def str(self, key: str) -> str:
        return self._get(key).strip()

    def list(self, key: str) -> list[str]:
        return [p.strip() for p in self._get(key).split(",") if p.strip()]

    def floats(self, key: str) -> list[float]:
        return [float(p) for p in self.list(key)]

    def ints(self, key: str) -> list[int]:
        return [int(p) for p in self.list(key)]

    def path(self, key: str) -> Path:
        p = Path(self.str(key))
        return p if p.is_absolute() else (self.base_dir / p)

    def _get(self, key: str) -> str:
        if key not in self:
            raise ConfigError(f"missing config key {key!r}")
        return self[key]

    def updated(self, **overrides) -> "RunConfig":
        """Copy with dotted-key overrides given as ``section__key=value``."""
        out = RunConfig(self)
        out.base_dir = self.base_dir
        for k, v in overrides.items():
            key = k.replace("__", ".")
            if key not in KNOWN_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            out[key] = str(v)
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {self[k]}\n" for k in sorted(self))


def parse_config(text: str, base_dir: str | os.PathLike = ".") -> RunConfig:
    cfg = RunConfig(DEFAULTS)
    cfg.base_dir = Path(base_dir)
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in KNOWN_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cfg[key] = value
    for key in list(cfg):
        if key.endswith(PATH_SUFFIXES) and cfg[key]:
            cfg[key] = os.path.normpath(cfg.path(key))
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return parse_config("")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), path.parent.resolve())


def apply_overrides(cfg: RunConfig, pairs: Iterable[tuple[str, object]] | Mapping[str, object]) -> RunConfig:
    items = pairs.items() if isinstance(pairs, Mapping) else pairs
    out = RunConfig(cfg)
    out.base_dir = cfg.base_dir
    for key, value in items:
        if value is None:
            continue
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = str(value)
    return out
