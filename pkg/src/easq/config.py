"""Run configuration: one YAML file with model, train, sim and eval sections."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .errors import ConfigError
from .model import EasqConfig
from .simenv import SimConfig
from .trainer import TrainConfig

CONFIG_ECHO = "config.yaml"


@dataclass
class EvalConfig:
    list_size: int = 100
    train_fraction: float = 0.8
    seed: int = 0

    def validate(self) -> "EvalConfig":
        if self.list_size < 2:
            raise ConfigError("eval.list_size must be >= 2")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("eval.train_fraction must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown eval keys: {sorted(unknown)}")
        return cls(**d)


SECTIONS = {"model": EasqConfig, "train": TrainConfig, "sim": SimConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    model: EasqConfig = field(default_factory=EasqConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.sim.validate()
        self.eval.validate()
        return self

    def to_dict(self) -> dict:
        return {name: getattr(self, name).to_dict() for name in SECTIONS}

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = d or {}
        if not isinstance(d, dict):
            raise ConfigError("config root must be a mapping")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        parts = {}
        for name, section in SECTIONS.items():
            body = d.get(name) or {}
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            if name == "model" and "emb_dims" in body:
                body = {**body, "emb_dims": tuple(body["emb_dims"])}
            try:
                parts[name] = section.from_dict(body)
            except TypeError as exc:
                raise ConfigError(f"bad {name} section: {exc}") from None
        return cls(**parts)

    def with_data_counts(self, n_users: int, n_items: int, n_categories: int) -> "RunConfig":
        """Vocabulary sizes follow the data, not whatever the file said."""
        model = replace(self.model, n_users=n_users, n_items=n_items,
                        n_categories=n_categories)
        return replace(self, model=model)


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value`` with the value read as a YAML scalar or list."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from None
    return key.strip().split("."), value


def apply_overrides(raw: dict, overrides) -> dict:
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in raw.items()}
    for text in overrides or ():
        path, value = parse_override(text)
        if len(path) != 2:
            raise ConfigError(f"override {text!r} must name section.key")
        section, key = path
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in override {text!r}")
        if key not in {f.name for f in fields(SECTIONS[section])}:
            raise ConfigError(f"unknown key {section}.{key}")
        out.setdefault(section, {})
        if not isinstance(out[section], dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        out[section][key] = value
    return out


def load_config(path: Path | None = None, overrides=()) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
    return RunConfig.from_dict(apply_overrides(raw, overrides)).validate()


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False)


def write_config_echo(config: RunConfig, out_dir: Path) -> Path:
    path = Path(out_dir) / CONFIG_ECHO
    path.write_text(dump_config(config), encoding="utf-8")
    return path
