"""Plain-text run configuration: sectioned key=value files.

Format, by example::

    # comment lines start with '#'
    [env]
    name = dense
    teleport = true

    [grpo]
    g_online = 10.0
    group_size = 8

Sections: [env], [model], [pretrain], [grpo], [ppo], [qguided]. Every
key maps to a field of the corresponding config dataclass ([env] is the
environment name, the teleport capability flag, and the online RTG
target g_online; [model] is the policy architecture minus the
env-derived obs/action dims). Unknown sections or keys are rejected with
the offending line number. Values are parsed by the field's declared
type; floats serialize via repr, which round-trips bit-exactly.

`save_config` writes the fully resolved configuration (every key of
every section, defaults included), so a saved file documents all
defaults, and save -> load is the identity. `config_hash` digests that
resolved form; two configs differing only in comments or key order hash
identically.
"""

from __future__ import annotations

import hashlib
import types
import typing
from dataclasses import MISSING, fields
from pathlib import Path

from .envs import make_env
from .grpo import GrpoConfig
from .nets import DTConfig
from .ppo import PpoConfig
from .pretrain import PretrainConfig
from .qguided import QguidedConfig


class ConfigError(ValueError):
    pass


_SECTION_CLASSES = {
    "pretrain": PretrainConfig,
    "grpo": GrpoConfig,
    "ppo": PpoConfig,
    "qguided": QguidedConfig,
}

# [env] carries the experiment-level knobs that several sections share.
_ENV_SCHEMA = {
    "name": (str, "dense"),
    "teleport": (bool, True),
    "g_online": (float, 10.0),
}

_MODEL_EXCLUDE = ("obs_dim", "action_dim")


def _dataclass_schema(cls, exclude=()):
    hints = typing.get_type_hints(cls)
    schema = {}
    for f in fields(cls):
        if f.name in exclude:
            continue
        default = f.default if f.default is not MISSING else None
        schema[f.name] = (hints[f.name], default)
    return schema


def _schemas():
    out = {"env": dict(_ENV_SCHEMA), "model": _dataclass_schema(DTConfig, _MODEL_EXCLUDE)}
    for name, cls in _SECTION_CLASSES.items():
        out[name] = _dataclass_schema(cls)
    # the file format supplies the RTG target from [env]; the dataclasses
    # keep it required so library callers must choose it explicitly
    for name in _SECTION_CLASSES:
        out[name].pop("g_online", None)
    return out


_SCHEMAS = _schemas()


def _parse_value(text: str, typ, key: str, lineno: int):
    origin = typing.get_origin(typ)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return _parse_value(text, args[0], key, lineno)
    if typ is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"line {lineno}: {key} expects true/false, got {text!r}")
    if typ is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} expects an integer, got {text!r}")
    if typ is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"line {lineno}: {key} expects a number, got {text!r}")
    if typ is str:
        return text
    raise ConfigError(f"line {lineno}: unsupported type for {key}")


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


class TrainConfig:
    """Resolved configuration: every section fully populated."""

    def __init__(self, sections: dict[str, dict] | None = None):
        self.sections = {
            name: {k: d for k, (_, d) in schema.items()} for name, schema in _SCHEMAS.items()
        }
        for name, overrides in (sections or {}).items():
            if name not in self.sections:
                raise ConfigError(f"unknown section [{name}]")
            for k, v in overrides.items():
                if k not in self.sections[name]:
                    raise ConfigError(f"unknown key {k!r} in section [{name}]")
                self.sections[name][k] = v
        self.validate()

    def __eq__(self, other):
        return isinstance(other, TrainConfig) and self.sections == other.sections

    @property
    def env_name(self) -> str:
        return self.sections["env"]["name"]

    @property
    def teleport(self) -> bool:
        return self.sections["env"]["teleport"]

    @property
    def g_online(self) -> float:
        return self.sections["env"]["g_online"]

    def make_env(self):
        return make_env(self.env_name, teleport=self.teleport)

    def model_config(self, obs_dim: int, action_dim: int) -> DTConfig:
        return DTConfig(obs_dim=obs_dim, action_dim=action_dim, **self.sections["model"])

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(**self.sections["pretrain"])

    def grpo_config(self) -> GrpoConfig:
        return GrpoConfig(g_online=self.g_online, **self.sections["grpo"])

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(g_online=self.g_online, **self.sections["ppo"])

    def qguided_config(self) -> QguidedConfig:
        return QguidedConfig(g_online=self.g_online, **self.sections["qguided"])

    def validate(self) -> None:
        """Construct every typed config so invariants are checked eagerly."""
        try:
            spec = make_env(self.env_name).spec
            self.model_config(spec.obs_dim, spec.action_dim)
            self.pretrain_config()
            self.grpo_config()
            self.ppo_config()
            self.qguided_config()
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    def serialize(self) -> str:
        lines = []
        for name in sorted(self.sections):
            lines.append(f"[{name}]")
            for k in sorted(self.sections[name]):
                lines.append(f"{k} = {_format_value(self.sections[name][k])}")
            lines.append("")
        return "\n".join(lines)


def parse_config(text: str) -> TrainConfig:
    overrides: dict[str, dict] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMAS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            overrides.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any [section]")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        schema = _SCHEMAS[section]
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in section [{section}]")
        typ, _ = schema[key]
        overrides[section][key] = _parse_value(val, typ, key, lineno)
    return TrainConfig(overrides)


def load_config(path: str | Path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def save_config(path: str | Path, cfg: TrainConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.serialize())
    return path


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(cfg.serialize().encode()).hexdigest()
