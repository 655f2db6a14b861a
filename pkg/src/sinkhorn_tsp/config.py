"""Run configuration: TOML files, flag overrides, and run directories.

Configs are strict: unknown keys are rejected rather than ignored, and every
invariant violation names the offending key. A run directory receives the
fully resolved config as a TOML snapshot before any training step, so a run
is reproducible from its snapshot alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .decoders import SinkhornConfig
from .model import EncoderConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n: int = 10
    epochs: int = 20
    batches_per_epoch: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-4
    grad_clip_norm: float = 1.0
    decoder: str = "sinkhorn"
    baseline_val_size: int = 1000
    baseline_threshold: float = 0.0
    seed: int = 0
    precision: str = "float32"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_before_sinkhorn: bool = False
    debug_hash_checks: bool = False
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        for key in ("n", "epochs", "batches_per_epoch", "batch_size", "baseline_val_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        if self.n < 3:
            raise ConfigError(f"n >= 3 required, got {self.n}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate > 0 required, got {self.learning_rate}")
        if not self.grad_clip_norm > 0:
            raise ConfigError(f"grad_clip_norm > 0 required, got {self.grad_clip_norm}")
        if self.baseline_threshold < 0:
            raise ConfigError(f"baseline_threshold >= 0 required, got {self.baseline_threshold}")
        if self.decoder not in ("softmax", "sinkhorn"):
            raise ConfigError(f"decoder must be 'softmax' or 'sinkhorn', got {self.decoder!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be 'float32' or 'float64', got {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(np.float32 if self.precision == "float32" else np.float64)


# External (file/flag) key name -> (dataclass field, type)
_TOP_KEYS = {
    "n": ("n", int),
    "epochs": ("epochs", int),
    "batches_per_epoch": ("batches_per_epoch", int),
    "batch_size": ("batch_size", int),
    "learning_rate": ("learning_rate", float),
    "grad_clip_norm": ("grad_clip_norm", float),
    "decoder": ("decoder", str),
    "baseline_val_size": ("baseline_val_size", int),
    "baseline_threshold": ("baseline_threshold", float),
    "seed": ("seed", int),
    "precision": ("precision", str),
    "adam_beta1": ("adam_beta1", float),
    "adam_beta2": ("adam_beta2", float),
    "adam_eps": ("adam_eps", float),
    "mask_before_sinkhorn": ("mask_before_sinkhorn", bool),
    "debug_hash_checks": ("debug_hash_checks", bool),
}
_SINKHORN_KEYS = {
    "lambda": ("lam", float),
    "iterations": ("iterations", int),
    "epsilon": ("eps", float),
    "log_domain": ("log_domain", bool),
}
_ENCODER_KEYS = {
    "d": ("d", int),
    "layers": ("layers", int),
    "heads": ("heads", int),
    "tanh_scale": ("tanh_scale", float),
    "normalization": ("normalization", str),
    "feed_forward": ("feed_forward", bool),
}
_SECTIONS = {"sinkhorn": _SINKHORN_KEYS, "encoder": _ENCODER_KEYS}


def all_config_keys():
    """Every accepted dotted key, for mirroring as CLI flags."""
    keys = [(k, t) for k, (_, t) in _TOP_KEYS.items()]
    for section, table in _SECTIONS.items():
        keys.extend((f"{section}.{k}", t) for k, (_, t) in table.items())
    return keys


def _coerce(key, value, typ):
    if isinstance(value, str) and typ is not str:
        text = value.strip()
        if typ is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        try:
            return typ(text)
        except ValueError:
            raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}") from None
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is bool and not isinstance(value, bool):
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if not isinstance(value, typ):
        raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}")
    return value


def load_config(path=None, overrides=None):
    """Resolve a TrainConfig from a TOML file plus dotted-key overrides.

    Overrides (e.g. {"sinkhorn.lambda": "5"} from flags) win over file
    values. Unknown keys anywhere are an error, not a warning.
    """
    top = {}
    nested = {name: {} for name in _SECTIONS}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                raw = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        for key, value in raw.items():
            if key in _SECTIONS:
                for sub, subval in value.items():
                    if sub not in _SECTIONS[key]:
                        raise ConfigError(f"unknown config key {key}.{sub!r}")
                    field_name, typ = _SECTIONS[key][sub]
                    nested[key][field_name] = _coerce(f"{key}.{sub}", subval, typ)
            elif key in _TOP_KEYS:
                field_name, typ = _TOP_KEYS[key]
                top[field_name] = _coerce(key, value, typ)
            else:
                raise ConfigError(f"unknown config key {key!r}")

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in dotted:
            section, sub = dotted.split(".", 1)
            if section not in _SECTIONS or sub not in _SECTIONS[section]:
                raise ConfigError(f"unknown config key {dotted!r}")
            field_name, typ = _SECTIONS[section][sub]
            nested[section][field_name] = _coerce(dotted, value, typ)
        else:
            if dotted not in _TOP_KEYS:
                raise ConfigError(f"unknown config key {dotted!r}")
            field_name, typ = _TOP_KEYS[dotted]
            top[field_name] = _coerce(dotted, value, typ)

    try:
        sinkhorn = SinkhornConfig(**nested["sinkhorn"])
        encoder = EncoderConfig(**nested["encoder"])
        return TrainConfig(sinkhorn=sinkhorn, encoder=encoder, **top)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def config_to_dict(config):
    """Nested dict using external key names (inverse of load_config)."""
    out = {}
    for key, (field_name, _) in _TOP_KEYS.items():
        out[key] = getattr(config, field_name)
    for section, table in _SECTIONS.items():
        sub_obj = getattr(config, section)
        out[section] = {key: getattr(sub_obj, f) for key, (f, _) in table.items()}
    return out


def _toml_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)  # shortest round-trip form
    if isinstance(value, int):
        return str(value)
    return '"%s"' % str(value).replace("\\", "\\\\").replace('"', '\\"')


def dump_toml(config):
    """Serialize a TrainConfig to TOML text that load_config reads back exactly."""
    data = config_to_dict(config)
    lines = [f"{k} = {_toml_value(v)}" for k, v in data.items() if not isinstance(v, dict)]
    for section in _SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {_toml_value(v)}" for k, v in data[section].items())
    return "\n".join(lines) + "\n"


def run_root():
    """Run-directory root; the only environment override the CLI honors."""
    return Path(os.environ.get("SINKHORN_TSP_RUN_ROOT", "runs"))


class RunDir:
    """A training run's directory: config snapshot, checkpoints, metrics.

    The snapshot is written at creation, before any training step. Filenames
    are versioned per epoch and never silently overwritten.
    """

    def __init__(self, path):
        self.path = Path(path)

    @classmethod
    def create(cls, path, config):
        run = cls(path)
        if run.path.exists() and any(run.path.iterdir()):
            raise ConfigError(f"run directory {run.path} already exists and is not empty")
        run.checkpoints.mkdir(parents=True, exist_ok=True)
        run.config_path.write_text(dump_toml(config), encoding="utf-8")
        return run

    @property
    def config_path(self):
        return self.path / "config.toml"

    @property
    def metrics_path(self):
        return self.path / "metrics.jsonl"

    @property
    def checkpoints(self):
        return self.path / "checkpoints"

    def checkpoint_path(self, epoch):
        return self.checkpoints / f"epoch_{epoch:04d}.ckpt"

    def load_config(self):
        return load_config(self.config_path)
