"""Flat run configuration: one file format covering the whole pipeline.

The config file is UTF-8 text, one ``key = value`` per line.  Blank
lines and lines starting with ``#`` are ignored.  Unknown keys are
errors, never warnings, so a typo cannot silently fall back to a
default.  CLI flags override file values.

One RunConfig carries everything a training or inference run needs:
architecture, training hyperparameters, cascade variant, augmentation
settings, paths, and the master seed every random stream derives from.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

from .errors import ConfigError

_LOSS_NAME = "categorical_cross_entropy"
CONDITIONING_MODES = ("ground_truth", "predicted")


@dataclass(frozen=True)
class RunConfig:
    # experiment identity
    seed: int = 1234
    variant: str = "mres-multi"
    # architecture (per stage; in_channels/num_classes follow the variant)
    depth: int = 3
    base_channels: int = 8
    use_norm: bool = True
    upsample: str = "tconv"
    # preprocessing
    crop: str = "none"  # "none" or "HxW", e.g. "192x192"
    # training
    loss: str = _LOSS_NAME
    learning_rate: float = 0.0005
    batch_size: int = 5
    epochs: int = 50
    augmentation: bool = True
    stage2_conditioning: str = "ground_truth"
    # augmentation details
    max_rotation_deg: float = 10.0
    max_translation_px: int = 10
    flip_horizontal: bool = True
    flip_vertical: bool = False
    # inference
    keep_largest_component: bool = False
    # paths (may also arrive as CLI flags)
    manifest: str = ""
    out: str = ""
    # concurrency (1 = fully deterministic mode)
    threads: int = 1

    def validate(self) -> "RunConfig":
        if self.epochs < 1:
            raise ConfigError("epochs ≥ 1 required, got " + str(self.epochs))
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.loss != _LOSS_NAME:
            raise ConfigError(
                f"loss is fixed to {_LOSS_NAME!r}, got {self.loss!r}"
            )
        if self.stage2_conditioning not in CONDITIONING_MODES:
            raise ConfigError(
                f"stage2_conditioning must be one of {CONDITIONING_MODES}, "
                f"got {self.stage2_conditioning!r}"
            )
        if self.max_rotation_deg < 0 or self.max_translation_px < 0:
            raise ConfigError("augmentation magnitudes must be >= 0")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        crop_hw(self)  # raises on malformed crop strings
        from .cascade import get_variant

        get_variant(self.variant)
        return self


def crop_hw(config: RunConfig) -> tuple[int, int] | None:
    """Parse the crop key: 'none' or 'HxW' with positive even ints."""
    text = config.crop.strip().lower()
    if text in ("", "none"):
        return None
    parts = text.split("x")
    if len(parts) != 2:
        raise ConfigError(f"crop must be 'none' or 'HxW', got {config.crop!r}")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError as exc:
        raise ConfigError(f"crop must be 'none' or 'HxW', got {config.crop!r}") from exc
    if h < 1 or w < 1:
        raise ConfigError(f"crop dims must be positive, got {config.crop!r}")
    return h, w


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False, "on": True, "off": False}


def _parse_value(key: str, text: str, target_type):
    text = text.strip()
    if target_type is bool:
        if text.lower() not in _BOOL_WORDS:
            raise ConfigError(f"config key {key!r}: expected a boolean, got {text!r}")
        return _BOOL_WORDS[text.lower()]
    if target_type is int:
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: expected an int, got {text!r}") from exc
    if target_type is float:
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: expected a number, got {text!r}") from exc
    return text


def parse_config_text(text: str, *, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into a typed dict of RunConfig fields."""
    types = {f.name: f.type for f in fields(RunConfig)}
    runtime_types = {
        f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)
    }
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(
                f"{source}:{lineno}: expected 'key = value', got {raw!r}"
            )
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate config key {key!r}")
        out[key] = _parse_value(key, value, runtime_types[key])
    return out


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a config file, apply overrides (CLI flags win), validate."""
    with open(path, encoding="utf-8") as f:
        values = parse_config_text(f.read(), source=str(path))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return replace(RunConfig(), **values).validate()


def config_from_overrides(overrides: dict) -> RunConfig:
    values = {k: v for k, v in overrides.items() if v is not None}
    return replace(RunConfig(), **values).validate()


def serialize_config(config: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def save_config(config: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_config(config))
