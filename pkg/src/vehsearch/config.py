"""Run configuration: presets, flat ``key = value`` files and command-line overrides."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path

from .encoders import PRESETS, EncoderConfig
from .scoring import LABEL_SMOOTHING, LAMBDA_CLS, LAMBDA_CTM, LAMBDA_FUT

ENCODER_FIELDS = tuple(f.name for f in dataclasses.fields(EncoderConfig))


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = "desk"
    # encoder dimensions (see EncoderConfig)
    l: int = 16
    e: int = 64
    c: int = 64
    d_model: int = 64
    num_heads: int = 4
    num_layers: int = 2
    image_size: int = 96
    downsample_factor: int = 8
    vocab_size: int = 512
    mask_width: int = 32
    num_stages: int = 6
    # optimisation
    batch_size: int = 8
    epochs: int = 12
    lr: float = 1e-3
    lr_drop_epochs: tuple[int, ...] = (9, 11)
    weight_decay: float = 3e-5
    label_smoothing: float = LABEL_SMOOTHING
    lambda_ctm: float = LAMBDA_CTM
    lambda1: float = LAMBDA_CLS
    lambda2: float = LAMBDA_FUT
    seed: int = 42
    sub_loss: str = "corrected"
    seg_loss: str = "bce"
    # inference
    frames_per_track_sample: int = 8
    denoise: bool = True
    ctm_source: str = "lexicon"  # language attributes for CTM: lexicon vote, head argmax as fallback
    score_batch: int = 256
    # synthetic corpus
    synth_tracks: int = 300
    synth_frames: int = 8
    synth_distractors: int = 2
    p_noise: float = 0.1
    test_fraction: float = 0.2
    # paths
    tracks: str = ""
    frames: str = ""
    queries: str = ""
    lexicon: str = ""
    vocab: str = ""
    checkpoint: str = ""
    output: str = "runs/latest"

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("lambda_ctm", "lambda1", "lambda2", "weight_decay", "label_smoothing", "p_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 1 or self.frames_per_track_sample < 1:
            raise ConfigError("batch_size and frames_per_track_sample must be >= 1")
        if self.sub_loss not in ("corrected", "paper_literal"):
            raise ConfigError(f"unknown sub_loss {self.sub_loss!r}")
        if self.seg_loss not in ("bce", "paper_literal"):
            raise ConfigError(f"unknown seg_loss {self.seg_loss!r}")
        if self.ctm_source not in ("lexicon", "head"):
            raise ConfigError(f"unknown ctm_source {self.ctm_source!r}")
        try:
            self.encoder()
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(**{k: getattr(self, k) for k in ENCODER_FIELDS})

    def replace(self, **kwargs) -> RunConfig:
        return dataclasses.replace(self, **kwargs)

    def dumps(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def preset(name: str) -> RunConfig:
    if name == "desk":
        return RunConfig()
    if name == "paper":
        enc = dataclasses.asdict(PRESETS["paper"])
        return RunConfig(preset="paper", batch_size=64, epochs=10, lr=3e-5, lr_drop_epochs=(5, 8), **enc)
    raise ConfigError(f"unknown preset {name!r}")


_HINTS = typing.get_type_hints(RunConfig)


def coerce(key: str, raw: str):
    """Convert a textual value to the type of RunConfig field ``key``."""
    if key not in _HINTS:
        raise ConfigError(f"unknown config key {key!r}")
    hint = _HINTS[key]
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if typing.get_origin(hint) is tuple:
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = coerce(key, raw)
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, object] | None = None) -> RunConfig:
    """Preset defaults, then the config file, then explicit overrides."""
    values: dict[str, object] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    values.update(overrides or {})
    base = preset(str(values.get("preset", "desk")))
    return dataclasses.replace(base, **values)
