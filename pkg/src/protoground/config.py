"""Run configuration: dataclass defaults, flat key=value config files, CLI overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, UsageError

TRANSFORM_CHOICES = ("gaussian", "laplacian", "blend-fixed", "blend-learnable")


@dataclass
class RunConfig:
    # data
    image_size: int = 64
    patch: int = 8
    tokens_target: int = 100
    text_len: int = 12
    min_shapes: int = 2
    max_shapes: int = 5
    min_half: float = 5.0
    max_half: float = 11.0
    relation_prob: float = 0.5
    holdout_colors: str = "magenta"
    holdout_shapes: str = "diamond"
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    n_openvocab: int = 200
    # model dims
    c0: int = 64
    c: int = 32
    c1: int = 64
    heads: int = 2
    text_depth: int = 2
    text_ffn_dim: int = 128
    depth: int = 4
    ffn_dim: int = 128
    n_p: int = 128
    k: int = 5
    # optimizer / schedule
    lr: float = 1e-3
    decay_epoch: int = 20
    epochs: int = 30
    batch_size: int = 25
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-4
    # loss
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    # ablation toggles
    use_vdfe: bool = True
    use_bank: bool = True
    use_multistage: bool = True
    transform_mode: str = "blend-learnable"
    # misc
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        if self.c % self.heads or self.c0 % self.heads:
            raise ConfigError("feature widths must be divisible by the head count")
        if self.transform_mode not in TRANSFORM_CHOICES:
            raise ConfigError(f"transform_mode must be one of {TRANSFORM_CHOICES}")
        side = int(round(self.tokens_target ** 0.5))
        if side * side != self.tokens_target:
            raise ConfigError(f"tokens_target={self.tokens_target} must be a perfect square")
        if self.k > self.n_p:
            raise ConfigError(f"k={self.k} exceeds bank size n_p={self.n_p}")
        if 2 * (self.max_half + 1) >= self.image_size:
            raise ConfigError(f"max_half={self.max_half} does not fit a "
                              f"{self.image_size}px image")
        return self

    @property
    def grid_side(self) -> int:
        return int(round(self.tokens_target ** 0.5))

    @property
    def effective_depth(self) -> int:
        return self.depth if self.use_multistage else 1

    def holdout_color_list(self):
        return tuple(v for v in self.holdout_colors.split(",") if v)

    def holdout_shape_list(self):
        return tuple(v for v in self.holdout_shapes.split(",") if v)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(**json.loads(text)).validate()


def _coerce(name: str, raw: str, target_type):
    raw = raw.strip()
    try:
        if target_type is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return target_type(raw)
    except ValueError as e:
        raise UsageError(f"config key {name!r}: cannot parse {raw!r} as {target_type.__name__}") from e


def parse_config_file(path: Path) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment; blank lines ignored."""
    fields = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    types = {name: type(getattr(RunConfig(), name)) for name in fields}
    out = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key = key.strip()
        if key not in types:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        out[key] = _coerce(key, value, types[key])
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path is not None:
        values.update(parse_config_file(Path(path)))
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        values[key] = val
    return RunConfig(**values).validate()
