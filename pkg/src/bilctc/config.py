"""INI run configuration merging task, model, training, decoding and data settings.

Example (every key optional; unknown sections or keys are rejected)::

    [task]              # synthetic data generator
    vocab_x = 20
    window = 3
    seed = 0

    [data]
    n_train = 3000
    n_dev = 200
    n_test = 200
    store = features    # or "seed": records keep only generation seeds

    [model]
    topology = synchronous
    taps = 2:ctc, 4:xctc
    pae = ctc, xctc
    clm_ratio = 0.1

    [train]
    steps = 2000
    seed = 0

    [decode]
    mode = rescoring
    beam = 5            # "none" searches exhaustively
    ctc_weight = 0.1
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .data import SyntheticTaskSpec
from .decode import DecodeConfig
from .errors import ConfigurationError, MissingFileError
from .model import ModelSpec
from .train import TrainConfig


@dataclass
class DataConfig:
    n_train: int = 3000
    n_dev: int = 200
    n_test: int = 200
    store: str = "features"

    def __post_init__(self):
        if self.store not in ("features", "seed"):
            raise ConfigurationError("data.store must be 'features' or 'seed'")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise ConfigurationError("split sizes must be non-negative")


SECTIONS = {
    "task": SyntheticTaskSpec,
    "data": DataConfig,
    "model": ModelSpec,
    "train": TrainConfig,
    "decode": DecodeConfig,
}


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _split(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def parse_value(section: str, key: str, text: str, default):
    try:
        if key == "taps":
            out = []
            for item in _split(text):
                layer, kind = item.split(":")
                out.append((int(layer), kind.strip()))
            return out
        if key == "pae":
            return _split(text)
        if key == "beam":
            return None if text.strip().lower() == "none" else int(text)
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text.strip()
    except ValueError as exc:
        raise ConfigurationError(f"[{section}] {key} = {text!r}: {exc}") from exc


def _format_list(value) -> str:
    parts = []
    for v in value:
        parts.append(f"{v[0]}:{v[1]}" if isinstance(v, (list, tuple)) else str(v))
    return ", ".join(parts)


@dataclass
class RunConfig:
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    @classmethod
    def from_values(cls, values: dict[str, dict[str, str]]) -> "RunConfig":
        """Build from ``{section: {key: text}}``; omitted keys keep their defaults."""
        parts = {}
        for section, klass in SECTIONS.items():
            defaults = {f.name: getattr(klass(), f.name) for f in dataclasses.fields(klass) if f.init}
            given = values.get(section, {})
            unknown = sorted(set(given) - set(defaults))
            if unknown:
                raise ConfigurationError(f"unknown keys in [{section}]: {', '.join(unknown)}")
            kwargs = {k: parse_value(section, k, v, defaults[k]) for k, v in given.items()}
            try:
                parts[section] = klass(**kwargs)
            except TypeError as exc:
                raise ConfigurationError(f"[{section}]: {exc}") from exc
        extra = sorted(set(values) - set(SECTIONS))
        if extra:
            raise ConfigurationError(f"unknown config sections: {', '.join(extra)}")
        return cls(**parts)

    def to_ini(self) -> str:
        """Every resolved value, defaults included, plus the tool version."""
        cp = configparser.ConfigParser(interpolation=None)
        cp["meta"] = {"tool_version": __version__}
        for section in SECTIONS:
            obj = getattr(self, section)
            cp[section] = {}
            for f in dataclasses.fields(obj):
                if not f.init:
                    continue
                v = getattr(obj, f.name)
                cp[section][f.name] = _format_list(v) if isinstance(v, list) else format_scalar(v)
        lines = []
        for section in cp.sections():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in cp[section].items())
            lines.append("")
        return "\n".join(lines)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_ini(), encoding="utf-8")
        return path


def format_scalar(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def read_ini(path: str | Path) -> dict[str, dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    values = {s: dict(cp[s]) for s in cp.sections()}
    values.pop("meta", None)  # written by to_ini, ignored on load
    return values


def load_run_config(
    path: str | Path | None = None, overrides: dict[str, dict[str, str]] | None = None
) -> RunConfig:
    """File values first, then ``overrides`` (command-line flags) on top."""
    values = read_ini(path) if path else {}
    for section, kv in (overrides or {}).items():
        values.setdefault(section, {}).update(kv)
    return RunConfig.from_values(values)


def parse_set_option(items: list[str]) -> dict[str, dict[str, str]]:
    """``["model.d_model=64", ...]`` -> ``{"model": {"d_model": "64"}}``."""
    out: dict[str, dict[str, str]] = {}
    for item in items:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
        out.setdefault(section.strip(), {})[name.strip()] = value.strip()
    return out
