"""Config file handling: JSON documents or flat ``key = value`` text.

Text form uses dotted section keys, one per line::

    # desk run
    encoder.base_channels = 16
    unet.channel_multiplier = [1, 2]
    train.total_steps = 2000
    loss.lambda_p = 0.1

Values parse as JSON where possible (numbers, lists, booleans) and fall
back to bare strings.  The resulting nested dict maps onto the config
dataclasses; it is also what gets persisted into checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

from .losses import LossConfig
from .models import EncoderConfig, UNetConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict:
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON config: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("JSON config must be an object")
        return doc
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: key {key!r} conflicts with a value")
        node[parts[-1]] = parsed
    return out


def parse_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text())


def _tupled(d: dict, keys: tuple[str, ...]) -> dict:
    out = dict(d)
    for k in keys:
        if k in out and isinstance(out[k], list):
            out[k] = tuple(out[k])
    return out


def build_configs(doc: dict) -> tuple[EncoderConfig, UNetConfig, TrainConfig]:
    """Instantiate the three config dataclasses from a parsed document."""
    try:
        enc = EncoderConfig(**_tupled(doc.get("encoder", {}), ("channel_multipliers",)))
        unet = UNetConfig(**_tupled(doc.get("unet", {}),
                                    ("channel_multiplier", "num_res_blocks",
                                     "downsampling_factor", "attn_resolutions")))
        loss = LossConfig(**doc.get("loss", {}))
        train = TrainConfig(loss=loss, **doc.get("train", {}))
    except TypeError as exc:
        raise ConfigError(f"unknown config field: {exc}") from exc
    return enc, unet, train


def apply_overrides(train: TrainConfig, **overrides) -> TrainConfig:
    """Apply CLI flag overrides (None values are ignored)."""
    loss_fields = {"lambda_p", "lambda_m", "cond_dropout_rate",
                   "adversarial_weight", "perceptual_kind"}
    loss_kw = {k: v for k, v in overrides.items() if k in loss_fields and v is not None}
    train_kw = {k: v for k, v in overrides.items()
                if k not in loss_fields and v is not None}
    if loss_kw:
        train_kw["loss"] = replace(train.loss, **loss_kw)
    return replace(train, **train_kw) if train_kw else train
