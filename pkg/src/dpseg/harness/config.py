"""Run configuration: a flat ``key = value`` file parsed with configparser."""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..errors import InvalidConfigError


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 1000
    batch_size: int = 4
    lr: float = 2e-3
    weight_decay: float = 1e-4
    encoder_lr_factor: float = 0.01
    K: int = 4
    M: int = 4
    image_size: int = 64
    train_scenes: int = 64
    eval_scenes: int = 24
    shapes_min: int = 2
    shapes_max: int = 5
    d_z: int = 64
    encoder_dims: tuple = (16, 32, 64, 128)
    hidden_dims: tuple = (62, 32, 16)
    d_F: int = 128
    embed_kernel: int = 3
    prompt_mode: str = "dual"
    fusion: str = "dual-embed"
    guidance: str = "visual"
    guidance_scales: tuple = (4, 3, 2)
    prompt_noise: float = 0.0
    text_correlation: float = 0.6
    prompt_size: int = 64
    detection_threshold: float = 0.005

    def __post_init__(self):
        if self.K < 2 or self.M < 1 or self.steps < 0 or self.batch_size < 1:
            raise InvalidConfigError("K >= 2, M >= 1, steps >= 0 and batch_size >= 1 required")
        if self.image_size % 32 or self.prompt_size % 32:
            raise InvalidConfigError("image_size and prompt_size must be multiples of 32")
        if self.train_scenes < 1 or self.eval_scenes < 0:
            raise InvalidConfigError("train_scenes must be positive")
        if not 0 <= self.prompt_noise <= 1:
            raise InvalidConfigError("prompt_noise must lie in [0, 1]")
        if self.lr < 0:
            raise InvalidConfigError("lr must be non-negative")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in known:
                raise InvalidConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key], value)
        return cls(**kwargs)


def _coerce(f, value):
    default = f.default
    try:
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return tuple(int(v) for v in value)
        if isinstance(default, bool):
            return str(value).lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError) as exc:
        raise InvalidConfigError(f"bad value for {f.name}: {value!r}") from exc


def load_config(path, **overrides) -> TrainConfig:
    """Read ``key = value`` lines (an optional ``[train]`` section header is
    allowed; ``#`` starts a comment)."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.lstrip().startswith("["):
        text = "[train]\n" + text
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str   # keys such as K and d_F are case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise InvalidConfigError(f"{path}: {exc}") from exc
    values = {}
    for section in parser.sections():
        values.update(parser[section])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values)
