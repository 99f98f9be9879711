"""Line-based `key = value` config files covering model and training knobs."""

from __future__ import annotations

import os
from dataclasses import asdict, fields

from .model import ModelConfig
from .train import TrainConfig


def _convert(key: str, text: str, default, line_no: int):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v.strip()) for v in text.split(",") if v.strip())
        return text
    except ValueError as e:
        raise ValueError(f"line {line_no}: bad value for '{key}': {e}") from e


def parse_config(path: str | None) -> tuple[TrainConfig, ModelConfig]:
    """Parse a config file; missing path or empty file yields all defaults.
    Unknown keys and type errors are rejected with the offending line."""
    model_defaults = asdict(ModelConfig())
    train_defaults = asdict(TrainConfig())
    model_kw: dict = {}
    train_kw: dict = {}
    if path is not None:
        with open(path) as f:
            for line_no, line in enumerate(f, 1):
                stripped = line.split("#", 1)[0].strip()
                if not stripped:
                    continue
                if "=" not in stripped:
                    raise ValueError(f"{path}: line {line_no}: expected 'key = value', "
                                     f"got {stripped!r}")
                key, _, text = stripped.partition("=")
                key = key.strip()
                text = text.strip()
                if key in model_defaults:
                    model_kw[key] = _convert(key, text, model_defaults[key], line_no)
                elif key in train_defaults:
                    train_kw[key] = _convert(key, text, train_defaults[key], line_no)
                else:
                    raise ValueError(f"{path}: line {line_no}: unknown key '{key}'")
    return TrainConfig(**train_kw), ModelConfig(**model_kw)


def write_effective_config(train_cfg: TrainConfig, model_cfg: ModelConfig,
                           out_dir: str, extra: dict | None = None):
    """Echo the effective configuration next to the run outputs."""
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "effective_config.txt")
    with open(path, "w") as f:
        for cfg in (model_cfg, train_cfg):
            for fld in fields(cfg):
                value = getattr(cfg, fld.name)
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                f.write(f"{fld.name} = {value}\n")
        for key, value in (extra or {}).items():
            f.write(f"{key} = {value}\n")
    return path
