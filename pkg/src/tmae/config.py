"""Run configuration: schema, file parsing, and CLI overrides.

Config files are plain text with ``[section]`` headers and ``key = value``
lines; ``#`` starts a comment. The schema below is the single source of
truth: the CLI help, the parser, and the checkpoint config echo are all
generated from it, and unknown sections or keys are hard errors.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from typing import Any, Optional

from .errors import ConfigError


@dataclass(frozen=True)
class Key:
    type: type
    default: Any
    help: str
    choices: Optional[tuple[str, ...]] = None


# fmt: off
SCHEMA: dict[str, dict[str, Key]] = {
    "data": {
        "manifest":         Key(str, "", "manifest CSV path; clip paths resolve against its directory"),
        "clips_root":       Key(str, "", "override directory for clip files (default: manifest directory)"),
        "frames":           Key(int, 10, "frames per sampled clip (T)"),
        "height":           Key(int, 32, "frame height after resizing"),
        "width":            Key(int, 32, "frame width after resizing"),
        "window_s":         Key(float, 1.0, "temporal window covered by one clip, seconds"),
        "split_train":      Key(float, 0.6, "fraction of synthesized clips assigned to train"),
        "split_val":        Key(float, 0.1, "fraction of synthesized clips assigned to val"),
        "synth_fps":        Key(float, 50.0, "frame rate of synthesized videos"),
        "synth_duration_s": Key(float, 2.5, "length of synthesized videos, seconds"),
        "synth_period_s":   Key(float, 1.0, "pulsation period of the synthetic disk, seconds"),
        "synth_background": Key(float, 0.1, "background intensity of synthetic frames"),
        "synth_noise_sigma": Key(float, 0.05, "stddev of Gaussian pixel noise added to synthetic frames"),
        "synth_balance":    Key(float, 0.5, "fraction of synthesized clips with reduced EF (positive class)"),
        "synth_r_max_lo":   Key(float, 8.0, "lower bound for the maximum disk radius, pixels"),
        "synth_r_max_hi":   Key(float, 13.0, "upper bound for the maximum disk radius, pixels"),
        "synth_ef_lo":      Key(float, 0.15, "lowest EF analog sampled for the reduced class"),
        "synth_ef_hi":      Key(float, 0.85, "highest EF analog sampled for the normal class"),
        "synth_ef_margin":  Key(float, 0.05, "half-gap kept free around the 0.5 EF-analog boundary"),
    },
    "model": {
        "variant":        Key(str, "tiny", "encoder preset", choices=("micro", "tiny", "base")),
        "patch_size":     Key(int, 4, "side length of square patches, pixels"),
        "mlp_ratio":      Key(float, 4.0, "MLP hidden width as a multiple of the block width"),
        "dec_dim":        Key(int, 128, "decoder width"),
        "dec_depth":      Key(int, 4, "decoder blocks"),
        "dec_heads":      Key(int, 4, "decoder attention heads"),
        "head_hidden1":   Key(int, 256, "first classifier hidden width"),
        "head_hidden2":   Key(int, 128, "second classifier hidden width"),
        "frame_features": Key(str, "visible", "token pool feeding the contrastive loss",
                              choices=("visible", "restored")),
    },
    "mask": {
        "ratio": Key(float, 0.75, "fraction of patches masked per frame during pretraining"),
    },
    "loss": {
        "lambda": Key(float, 0.1, "weight of the contrastive term in the total loss"),
        "tau_p":  Key(int, 1, "frame-gap threshold; pairs this close count as positives"),
        "tau_m":  Key(float, 0.5, "cosine-distance margin for negative pairs"),
    },
    "train": {
        "base_lr":          Key(float, 1.5e-4, "base learning rate; peak = base_lr * batch_size / 256"),
        "weight_decay":     Key(float, 0.05, "decoupled AdamW weight decay"),
        "batch_size":       Key(int, 32, "clips per optimizer step"),
        "warmup_epochs":    Key(int, 200, "linear warmup length for pretraining, epochs"),
        "max_epochs":       Key(int, 1600, "pretraining epoch budget"),
        "min_lr":           Key(float, -1.0, "cosine floor; -1 means peak / 100"),
        "ft_base_lr":       Key(float, -1.0, "fine-tuning base learning rate; -1 reuses base_lr"),
        "ft_max_epochs":    Key(int, 200, "fine-tuning epoch budget"),
        "ft_warmup_epochs": Key(int, -1, "fine-tuning warmup; -1 means 5 percent of ft_max_epochs"),
        "patience":         Key(int, 75, "early-stopping patience, epochs"),
        "min_delta":        Key(float, 5e-5, "smallest loss decrease that counts as improvement"),
        "grad_clip":        Key(float, 1.0, "global gradient-norm clip; 0 disables"),
        "monitor":          Key(str, "rec", "loss monitored for early stopping/best checkpoint",
                                choices=("rec", "total")),
        "mode":             Key(str, "end_to_end", "fine-tuning mode", choices=("base", "end_to_end")),
        "use_contrastive":  Key(bool, True, "add the temporal contrastive term during pretraining"),
        "oracle":           Key(bool, False, "align sampling windows with end diastole"),
        "seed":             Key(int, 0, "root seed; every subsystem derives its stream from it"),
        "beta1":            Key(float, 0.9, "AdamW first-moment decay"),
        "beta2":            Key(float, 0.95, "AdamW second-moment decay"),
        "eps":              Key(float, 1e-8, "AdamW denominator epsilon"),
    },
    "eval": {
        "threshold": Key(float, 0.5, "probability threshold for the positive (reduced-EF) class"),
    },
}
# fmt: on


@dataclass
class Config:
    """Resolved configuration: typed values plus which keys were set explicitly."""

    values: dict[str, dict[str, Any]]
    explicit: set[tuple[str, str]]

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def is_explicit(self, section: str, key: str) -> bool:
        return (section, key) in self.explicit

    def set(self, section: str, key: str, raw: str | Any) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        spec = SCHEMA[section][key]
        value = _coerce(raw, spec, section, key)
        self.values[section][key] = value
        self.explicit.add((section, key))

    def echo(self) -> dict[str, dict[str, Any]]:
        """Deep copy of the resolved values, for logging into artifacts."""
        return {s: dict(kv) for s, kv in self.values.items()}


def default_config() -> Config:
    values = {s: {k: spec.default for k, spec in keys.items()} for s, keys in SCHEMA.items()}
    return Config(values=values, explicit=set())


def _coerce(raw: Any, spec: Key, section: str, key: str) -> Any:
    if not isinstance(raw, str):
        value = raw
    elif spec.type is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            value = True
        elif low in ("false", "0", "no", "off"):
            value = False
        else:
            raise ConfigError(f"[{section}] {key}: expected a boolean, got {raw!r}")
    else:
        try:
            value = spec.type(raw.strip())
        except ValueError:
            raise ConfigError(
                f"[{section}] {key}: expected {spec.type.__name__}, got {raw!r}"
            ) from None
    if spec.choices is not None and value not in spec.choices:
        raise ConfigError(
            f"[{section}] {key}: {value!r} not one of {list(spec.choices)}"
        )
    if not isinstance(value, spec.type):
        try:
            value = spec.type(value)
        except (TypeError, ValueError):
            raise ConfigError(f"[{section}] {key}: cannot interpret {raw!r}") from None
    return value


def load_config(
    path: Optional[str] = None, overrides: Optional[list[str]] = None
) -> Config:
    """Build a Config from defaults, an optional file, and --set overrides."""
    cfg = default_config()
    if path:
        parser = configparser.ConfigParser(
            delimiters=("=",), inline_comment_prefixes=("#",), interpolation=None
        )
        parser.optionxform = str  # keys are case-sensitive
        read = parser.read(path, encoding="utf-8")
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        target, raw = item.split("=", 1)
        if target.count(".") != 1:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        section, key = target.split(".")
        cfg.set(section.strip(), key.strip(), raw)
    return cfg


def describe_keys() -> str:
    """Human-readable listing of every key with its default (for --help)."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, spec in keys.items():
            choice = f" (one of {', '.join(spec.choices)})" if spec.choices else ""
            lines.append(f"  {key} = {spec.default!r}: {spec.help}{choice}")
    return "\n".join(lines)
