"""Run configuration: one TOML file, explicit defaults, strict keys.

Sections map one-to-one onto the owning modules' config dataclasses:

  [phantom]   PhantomConfig fields plus n_studies / start_index
  [data]      display windowing (window_level, window_width)
  [arch]      ArchConfig fields
  [train]     ProtocolConfig fields (window_* come from [data])
  [eval]      n_bootstrap, seed, level

Unknown sections or keys are rejected.  Optional fields use ``0`` (or
``0.0``) as the "auto/off" sentinel since TOML has no null: decay_period,
single_stage_epochs, volume_norm_mm3, negatives_per_positive,
max_positives_per_epoch, positive_class_weight.

Every artifact-producing command echoes the fully resolved configuration
(`config.resolved.toml`) beside its outputs; re-running with that file
reproduces the artifacts bit for bit at thread count 1.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version dependent
    import tomli as tomllib

from .model import ArchConfig
from .phantom import DEFAULT_WINDOW_LEVEL, DEFAULT_WINDOW_WIDTH, PhantomConfig
from .train import ProtocolConfig

CONFIG_ENV_VAR = "HEMONET_CONFIG"
RESOLVED_NAME = "config.resolved.toml"

# fields where the TOML sentinel 0 / 0.0 means "use the automatic default"
_OPTIONAL_SENTINEL = {
    ("train", "decay_period"),
    ("train", "single_stage_epochs"),
    ("train", "max_positives_per_epoch"),
    ("train", "negatives_per_positive"),
    ("train", "positive_class_weight"),
    ("arch", "volume_norm_mm3"),
}


class ConfigError(Exception):
    """Configuration file or override is invalid."""


@dataclass(frozen=True)
class GenerateConfig:
    n_studies: int = 200
    start_index: int = 0

    def __post_init__(self):
        if self.n_studies < 1 or self.start_index < 0:
            raise ValueError("n_studies must be >= 1 and start_index >= 0")


@dataclass(frozen=True)
class DataConfig:
    window_level: float = DEFAULT_WINDOW_LEVEL
    window_width: float = DEFAULT_WINDOW_WIDTH

    def __post_init__(self):
        if self.window_width <= 0:
            raise ValueError("window_width must be positive")


@dataclass(frozen=True)
class EvalConfig:
    n_bootstrap: int = 10_000
    seed: int = 0
    level: str = "slice"

    def __post_init__(self):
        if self.n_bootstrap < 1:
            raise ValueError("n_bootstrap must be >= 1")
        if self.level not in ("slice", "study"):
            raise ValueError(f"eval level must be 'slice' or 'study', got {self.level!r}")


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig = PhantomConfig()
    generate: GenerateConfig = GenerateConfig()
    data: DataConfig = DataConfig()
    arch: ArchConfig = ArchConfig()
    train: ProtocolConfig = ProtocolConfig()
    eval: EvalConfig = EvalConfig()

    def protocol_with_windowing(self) -> ProtocolConfig:
        return dataclasses.replace(
            self.train,
            window_level=self.data.window_level,
            window_width=self.data.window_width,
        )


_SECTIONS = {
    "phantom": PhantomConfig,
    "generate": GenerateConfig,
    "data": DataConfig,
    "arch": ArchConfig,
    "train": ProtocolConfig,
    "eval": EvalConfig,
}
# [train] windowing is sourced from [data]; [phantom] generate counts live in [generate]
_HIDDEN_FIELDS = {"train": {"window_level", "window_width"}}


def _coerce(section, name, value):
    if (section, name) in _OPTIONAL_SENTINEL and value in (0, 0.0):
        return None
    if isinstance(value, list):
        return tuple(value)
    return value


def _build_section(section: str, entries: dict):
    cls = _SECTIONS[section]
    allowed = {f.name for f in dataclasses.fields(cls)} - _HIDDEN_FIELDS.get(section, set())
    unknown = set(entries) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}; "
            f"allowed: {', '.join(sorted(allowed))}"
        )
    kwargs = {k: _coerce(section, k, v) for k, v in entries.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] configuration: {exc}") from exc


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load TOML (or pure defaults), then apply flag overrides.

    ``overrides`` maps "section.key" to values and wins over the file;
    ``path=None`` falls back to $HEMONET_CONFIG, then to defaults.
    """
    if path is None:
        env = os.environ.get(CONFIG_ENV_VAR)
        path = Path(env) if env else None
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = tomllib.loads(path.read_text("utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    sections = {name: dict(raw.get(name, {})) for name in _SECTIONS}
    for spec, value in (overrides or {}).items():
        section, _, key = spec.partition(".")
        if section not in _SECTIONS:
            raise ConfigError(f"unknown override section {section!r}")
        sections[section][key] = value
    built = {name: _build_section(name, entries) for name, entries in sections.items()}
    return RunConfig(**built)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int,)):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, (tuple, list)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def dump_config(config: RunConfig) -> str:
    """Deterministic TOML text for the fully resolved configuration."""
    lines = []
    for section, cls in _SECTIONS.items():
        obj = getattr(config, section)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(cls):
            if f.name in _HIDDEN_FIELDS.get(section, set()):
                continue
            value = getattr(obj, f.name)
            if value is None:
                if (section, f.name) in _OPTIONAL_SENTINEL:
                    value = 0
                else:
                    continue
            lines.append(f"{f.name} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def write_resolved(config: RunConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / RESOLVED_NAME
    target.write_text(dump_config(config), "utf-8")
    return target
