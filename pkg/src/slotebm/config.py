"""Flat run configuration: dotted keys in a text file plus CLI overrides.

A config file holds one `key = value` pair per line (# comments allowed).
Every command validates its keys against an explicit schema - unknown keys
are rejected - and writes the fully resolved configuration next to its
outputs so any run can be reproduced from that file alone.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .datasets import DEFAULT_PALETTE, DatasetConfig
from .energy import EnergyConfig
from .model import ModelConfig
from .sampler import SamplerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Unknown key, bad value, or malformed config file."""


# value codecs -----------------------------------------------------------

def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_pair(s: str) -> tuple[int, int]:
    parts = [p for p in s.replace("[", "").replace("]", "").split(",") if p.strip()]
    if len(parts) != 2:
        raise ConfigError(f"expected two comma-separated integers, got {s!r}")
    return (int(parts[0]), int(parts[1]))


def _parse_float_pair(s: str) -> tuple[float, float]:
    parts = [p for p in s.replace("[", "").replace("]", "").split(",") if p.strip()]
    if len(parts) != 2:
        raise ConfigError(f"expected two comma-separated numbers, got {s!r}")
    return (float(parts[0]), float(parts[1]))


def _parse_float_list(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.replace("[", "").replace("]", "").split(",") if p.strip())


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.replace("[", "").replace("]", "").split(",") if p.strip())


def _parse_palette(s: str):
    return tuple(tuple(float(c) for c in rgb) for rgb in json.loads(s))


def _parse_optional_int(s: str):
    return None if s.strip().lower() in ("none", "") else int(s)


_CODECS = {
    "int": int,
    "float": float,
    "bool": _parse_bool,
    "str": str,
    "int_pair": _parse_int_pair,
    "float_pair": _parse_float_pair,
    "float_list": _parse_float_list,
    "int_list": _parse_int_list,
    "palette": _parse_palette,
    "optional_int": _parse_optional_int,
}


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        if value and isinstance(value[0], (tuple, list)):
            return json.dumps([list(v) for v in value])
        return ",".join(str(v) for v in value)
    return str(value)


# schemas ------------------------------------------------------------------

DATA_SCHEMA = {
    "data.height": ("int", 48),
    "data.width": ("int", 48),
    "data.n_scenes": ("int", 5000),
    "data.object_count_range": ("int_pair", (2, 3)),
    "data.size_range": ("float_pair", (5.0, 9.0)),
    "data.palette": ("palette", DEFAULT_PALETTE),
    "data.background_mode": ("str", "sampled"),
    "data.background_gray": ("float", 0.5),
    "data.rng_seed": ("int", 0),
}

MODEL_SCHEMA = {
    "model.height": ("int", 48),
    "model.width": ("int", 48),
    "model.feature_dim": ("int", 64),
    "model.latent_dim": ("int", 64),
    "model.encoder_layers": ("int", 4),
    "model.decoder_channels": ("int", 32),
    "model.decoder_layers": ("int", 4),
    "model.energy.variant": ("str", "attention"),
    "model.energy.n_blocks": ("int", 2),
    "model.energy.n_self_blocks": ("int", 2),
}

SAMPLER_SCHEMA = {
    "sampler.n_steps": ("int", 3),
    "sampler.step_size": ("float", 0.1),
    "sampler.noise_scale": ("float", 1.0),
    "sampler.n_slots": ("int", 4),
    "sampler.init": ("str", "standard_normal"),
    "sampler.truncate_backprop": ("bool", False),
}

TRAIN_SCHEMA = {
    "train.steps": ("int", 100_000),
    "train.batch_size": ("int", 32),
    "train.learning_rate": ("float", 2e-4),
    "train.warmup_steps": ("int", 2500),
    "train.horizon": ("optional_int", None),
    "train.grad_clip": ("float", 1.0),
    "train.seed": ("int", 0),
    "train.checkpoint_every": ("int", 1000),
    "train.log_every": ("int", 50),
    "train.keep_optimizer_in_final": ("bool", False),
}

# short forms accepted on the command line and in files
ALIASES = {
    "sampler.T": "sampler.n_steps",
    "sampler.epsilon": "sampler.step_size",
    "object_count_range": "data.object_count_range",
}

COMMAND_SCHEMAS = {
    "gen-data": {
        **DATA_SCHEMA,
        "gen.test_scenes": ("int", 320),
        "out.dir": ("str", "runs/data"),
    },
    "train": {
        **MODEL_SCHEMA,
        **SAMPLER_SCHEMA,
        **TRAIN_SCHEMA,
        "data.path": ("str", "runs/data/train.sprites"),
        "out.dir": ("str", "runs/train"),
    },
    "ablate": {
        **DATA_SCHEMA,
        **MODEL_SCHEMA,
        **SAMPLER_SCHEMA,
        **TRAIN_SCHEMA,
        "ablate.step_sizes": ("float_list", ()),
        "ablate.n_steps": ("int_list", ()),
        "ablate.noise_scales": ("float_list", ()),
        "ablate.n_blocks": ("int_list", ()),
        "ablate.seeds": ("int_list", (0,)),
        "ablate.test_scenes": ("int", 64),
        "out.dir": ("str", "runs/ablate"),
    },
}


def parse_file(path: str | Path) -> dict[str, str]:
    """Read raw key/value strings from a flat config file."""
    raw: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def parse_overrides(tokens: tuple[str, ...] | list[str]) -> dict[str, str]:
    """Parse CLI override tokens: `--dot.key value`, `--dot.key=value`, `dot.key=value`."""
    out: dict[str, str] = {}
    i = 0
    tokens = list(tokens)
    while i < len(tokens):
        token = tokens[i]
        key = token[2:] if token.startswith("--") else token
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if not token.startswith("--") or i + 1 >= len(tokens):
                raise ConfigError(f"override {token!r} is missing a value")
            i += 1
            value = tokens[i]
        out[key.strip()] = value.strip()
        i += 1
    return out


def resolve(command: str, config_file: str | Path | None, overrides) -> dict:
    """Merge defaults, file values, and overrides into typed values."""
    schema = COMMAND_SCHEMAS[command]
    raw: dict[str, str] = {}
    if config_file is not None:
        raw.update(parse_file(config_file))
    if overrides:
        if not isinstance(overrides, dict):
            overrides = parse_overrides(overrides)
        raw.update(overrides)

    values = {key: default for key, (_, default) in schema.items()}
    for key, text in raw.items():
        key = ALIASES.get(key, key)
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} for command {command!r}")
        codec, _ = schema[key]
        try:
            values[key] = _CODECS[codec](text)
        except ConfigError:
            raise
        except Exception as err:
            raise ConfigError(f"bad value for {key}: {text!r} ({err})") from err
    return values


def write_resolved(values: dict, path: str | Path) -> None:
    """Persist the fully resolved config, one sorted key per line."""
    lines = ["# resolved configuration"]
    lines += [f"{key} = {_format_value(values[key])}" for key in sorted(values)]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


# dataclass builders -------------------------------------------------------

def dataset_config(values: dict) -> DatasetConfig:
    return DatasetConfig(
        height=values["data.height"],
        width=values["data.width"],
        n_scenes=values["data.n_scenes"],
        object_count_range=values["data.object_count_range"],
        size_range=values["data.size_range"],
        palette=values["data.palette"],
        background_mode=values["data.background_mode"],
        background_gray=values["data.background_gray"],
        rng_seed=values["data.rng_seed"],
    )


def model_config(values: dict) -> ModelConfig:
    return ModelConfig(
        height=values["model.height"],
        width=values["model.width"],
        feature_dim=values["model.feature_dim"],
        latent_dim=values["model.latent_dim"],
        encoder_layers=values["model.encoder_layers"],
        decoder_channels=values["model.decoder_channels"],
        decoder_layers=values["model.decoder_layers"],
        energy=EnergyConfig(
            variant=values["model.energy.variant"],
            n_blocks=values["model.energy.n_blocks"],
            n_self_blocks=values["model.energy.n_self_blocks"],
        ),
    )


def sampler_config(values: dict) -> SamplerConfig:
    return SamplerConfig(
        n_steps=values["sampler.n_steps"],
        step_size=values["sampler.step_size"],
        noise_scale=values["sampler.noise_scale"],
        n_slots=values["sampler.n_slots"],
        latent_dim=values["model.latent_dim"],
        init=values["sampler.init"],
        truncate_backprop=values["sampler.truncate_backprop"],
    )


def train_config(values: dict) -> TrainConfig:
    return TrainConfig(
        steps=values["train.steps"],
        batch_size=values["train.batch_size"],
        learning_rate=values["train.learning_rate"],
        warmup_steps=values["train.warmup_steps"],
        horizon=values["train.horizon"],
        grad_clip=values["train.grad_clip"],
        seed=values["train.seed"],
        checkpoint_every=values["train.checkpoint_every"],
        log_every=values["train.log_every"],
        keep_optimizer_in_final=values["train.keep_optimizer_in_final"],
        model=model_config(values),
        sampler=sampler_config(values),
    )
