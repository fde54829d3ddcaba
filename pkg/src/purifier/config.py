"""Config resolution: TOML file + dotted-path flag overrides over a fully
defaulted schema, with per-field provenance so a run can be reproduced from
its archived resolved config alone."""

from __future__ import annotations

import difflib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import ValidationError

CONFIG_SCHEMA: dict[str, dict[str, object]] = {
    "run": {
        "tag": "run",
        "seed": 0,
        "out_root": "runs",
    },
    "dataset": {
        "source": "builtin_synthetic",
        "task_kind": "classification",
        "resolution": 32,
        "num_classes": 10,
        "n_per_class": 48,
        "test_n_per_class": 24,
        "seed": 0,
        "contrast": 0.06,
        "noise_std": 0.04,
        "phase_jitter": 0.25,
        "augment": False,
        "root": "",
    },
    "model": {
        "arch": "small_cnn",
        "substitute_arch": "slim_cnn",
        "epochs": 30,
        "lr": 1e-3,
        "batch_size": 64,
        "seed": 0,
        "target_checkpoint": "",
    },
    "generator": {
        "arch": "global",
        "base_channels": 24,
        "num_downsample": 2,
        "num_residual_blocks": 4,
    },
    "discriminator": {
        "scales": 1,
        "base_channels": 16,
        "num_layers": 3,
    },
    "attack": {
        "family": "pgd_kl",
        "epsilon": 0.031,
        "alpha": 0.0175,
        "steps": 4,
        "targeted": False,
        "target_rule": "none",
        "translation_invariant": False,
        "ti_kernel_size": 5,
        "random_start": True,
    },
    "loss": {
        "lambda1": 0.1,
        "lambda2": 1.0,
        "lambda3": 0.005,
        "lambda4": 50.0,
        "margin": 1.0,
        "inter_mode": "hinge",
        "normalize_features": True,
    },
    "optimizer": {
        "lr": 2e-4,
        "beta1": 0.5,
        "beta2": 0.999,
        "grad_clip": 10.0,
    },
    "ablation": {
        "pixel": "ours",
        "feature": "ours",
        "class_aware": True,
    },
    "train": {
        "batch_size": 32,
        "epochs": 20,
        "checkpoint_every": 0,
        "proxy_a_every": 1,
        "proxy_a_samples": 96,
        "perceptual_seed": 0,
    },
    "eval": {
        "checkpoint": "",
        "target_checkpoint": "",
        "substitute_checkpoint": "",
        "substitute_arch": "",
        "families": ["pgd_ce"],
        "epsilon": 0.031,
        "alpha": 0.0075,
        "steps": 8,
        "targeted": False,
        "target_rule": "none",
        "translation_invariant": False,
        "batch_size": 64,
        "resize_policy": "error",
    },
    "proxya": {
        "file_a": "",
        "file_b": "",
        "array_key": "x",
        "seed": 0,
    },
    "embed": {
        "target_checkpoint": "",
        "split": "test",
        "limit": 0,
    },
    "report": {
        "path": "",
    },
}


@dataclass
class ResolvedConfig:
    """Fully-defaulted config values plus where each one came from."""

    values: dict[str, dict[str, object]] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[section][key]

    def section(self, section: str) -> dict:
        return dict(self.values[section])

    def to_json(self) -> str:
        return json.dumps({"values": self.values, "provenance": self.provenance},
                          sort_keys=True, indent=2)


def _suggest(name: str, options) -> str:
    close = difflib.get_close_matches(name, list(options), n=1)
    return f"; closest valid name: {close[0]!r}" if close else ""


def _check_type(section: str, key: str, value, default) -> object:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"{section}.{key} expects a boolean, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(default, str) and isinstance(value, str):
        return value
    if isinstance(default, list):
        if isinstance(value, str):  # single item shorthand
            return [value]
        if isinstance(value, list):
            return list(value)
    raise ValidationError(
        f"{section}.{key} expects {type(default).__name__}, got {type(value).__name__} ({value!r})")


def _apply(resolved: ResolvedConfig, section: str, key: str, value) -> None:
    if section not in CONFIG_SCHEMA:
        raise ValidationError(f"unknown config section {section!r}{_suggest(section, CONFIG_SCHEMA)}")
    if key not in CONFIG_SCHEMA[section]:
        raise ValidationError(
            f"unknown config key {section}.{key!r}{_suggest(key, CONFIG_SCHEMA[section])}")
    resolved.values[section][key] = _check_type(section, key, value, CONFIG_SCHEMA[section][key])
    resolved.provenance[f"{section}.{key}"] = "user"


def _parse_override_value(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw


def parse_overrides(tokens: list[str]) -> dict[str, object]:
    """Parse ["--a.b", "1", "--c.d", "x"] style override pairs."""
    overrides: dict[str, object] = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--"):
            raise ValidationError(f"expected a --section.key flag, got {token!r}")
        name = token[2:]
        if "=" in name:
            name, raw = name.split("=", 1)
        else:
            if i + 1 >= len(tokens):
                raise ValidationError(f"flag {token!r} is missing a value")
            raw = tokens[i + 1]
            i += 1
        if "." not in name:
            raise ValidationError(f"override flags use dotted section.key paths, got {name!r}")
        overrides[name] = _parse_override_value(raw)
        i += 1
    return overrides


def resolve_config(config_path: str | Path | None = None,
                   overrides: dict[str, object] | None = None) -> ResolvedConfig:
    """Defaults <- config file <- flag overrides, with provenance."""
    resolved = ResolvedConfig(
        values={section: dict(fields) for section, fields in CONFIG_SCHEMA.items()},
        provenance={f"{s}.{k}": "default" for s, fields in CONFIG_SCHEMA.items() for k in fields},
    )
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ValidationError(f"config file not found: {path}")
        document = tomllib.loads(path.read_text())
        for section, content in document.items():
            if not isinstance(content, dict):
                raise ValidationError(f"top-level config entries must be sections, got {section!r}")
            for key, value in content.items():
                _apply(resolved, section, key, value)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        _apply(resolved, section, key, value)
    return resolved
