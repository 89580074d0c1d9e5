"""Training configuration: a flat key = value text file parsed into a typed
dataclass, plus the learning-rate schedule.

The FINDKIT_SEED environment variable overrides the configured seed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

from .detector import ModelConfig
from .textenc import SIZE_PROFILES


@dataclass(frozen=True)
class TrainConfig:
    # schedule
    steps: int = 3000
    batch_size: int = 12
    base_lr: float = 0.02
    warmup_steps: int = 100
    milestones: tuple[float, ...] = (0.7, 0.9)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    seed: int = 0
    # task mixing
    mix: str = "1:1:1"
    tasks: tuple[str, ...] = ("DET", "LOC", "REC")
    loc_prompt: str = "Find the X"
    det_prompt: str = "Find all the objects"
    loc_absent_prob: float = 0.0
    # data
    image_size: int = 128
    augment: str = "ablation"
    text_max_len: int = 16
    # model
    text_size: str = "small"
    text_heads: int = 4
    fusion_dim: int = 64
    fusion_layers: int = 2
    fusion_heads: int = 4
    fusion_levels: tuple[int, ...] = (4, 5)
    fusion_mechanism: str = "attention"
    backbone_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    head_hidden: int = 256
    encoders_pretrained: bool = False
    # bookkeeping
    eval_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if any(not 0 < m < 1 for m in self.milestones):
            raise ValueError(f"milestones must lie in (0, 1): {self.milestones}")
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError(f"milestones must ascend: {self.milestones}")
        if self.text_size not in SIZE_PROFILES:
            raise ValueError(f"unknown text size {self.text_size!r}")

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def config_hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def model_config(self, num_classes: int) -> ModelConfig:
        text_layers, text_dim = SIZE_PROFILES[self.text_size]
        return ModelConfig(
            num_classes=num_classes,
            image_size=self.image_size,
            backbone_channels=tuple(self.backbone_channels),
            blocks_per_stage=self.blocks_per_stage,
            text_dim=text_dim,
            text_layers=text_layers,
            text_heads=self.text_heads,
            text_max_len=self.text_max_len,
            fusion_dim=self.fusion_dim,
            fusion_layers=self.fusion_layers,
            fusion_heads=self.fusion_heads,
            fusion_deep_levels=tuple(self.fusion_levels),
            fusion_deep_mechanism=self.fusion_mechanism,
            head_hidden=self.head_hidden,
        )


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to base_lr, then stepwise decay at the milestones.

    A milestone at fraction m multiplies the rate by decay_factor from step
    m * steps onward (inclusive).
    """
    if not 0 <= step <= config.steps:
        raise ValueError(f"step {step} outside [0, {config.steps}]")
    if config.warmup_steps and step < config.warmup_steps:
        return config.base_lr * step / config.warmup_steps
    lr = config.base_lr
    for m in config.milestones:
        if step >= m * config.steps:
            lr *= config.decay_factor
    return lr


_TUPLE_FIELDS = {
    "milestones": float,
    "tasks": str,
    "fusion_levels": int,
    "backbone_channels": int,
}
_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def parse_config_text(text: str) -> dict[str, str]:
    """key = value lines; blank lines and # comments ignored."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def config_from_mapping(mapping: dict[str, str], base: TrainConfig = TrainConfig()) -> TrainConfig:
    """Coerce string values onto TrainConfig fields; unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    updates = {}
    for key, raw in mapping.items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        if key in _TUPLE_FIELDS:
            conv = _TUPLE_FIELDS[key]
            updates[key] = tuple(conv(p.strip()) for p in raw.split(",") if p.strip())
            continue
        current = getattr(base, key)
        if isinstance(current, bool):
            low = raw.lower()
            if low in _BOOL_TRUE:
                updates[key] = True
            elif low in _BOOL_FALSE:
                updates[key] = False
            else:
                raise ValueError(f"config key {key!r}: not a boolean: {raw!r}")
        elif isinstance(current, int):
            updates[key] = int(raw)
        elif isinstance(current, float):
            updates[key] = float(raw)
        else:
            updates[key] = raw
    return dataclasses.replace(base, **updates)


def load_train_config(path, env: dict | None = None) -> TrainConfig:
    """Read a config file and apply the FINDKIT_SEED override if set."""
    with open(path, encoding="utf-8") as fh:
        mapping = parse_config_text(fh.read())
    cfg = config_from_mapping(mapping)
    env = os.environ if env is None else env
    if "FINDKIT_SEED" in env:
        cfg = dataclasses.replace(cfg, seed=int(env["FINDKIT_SEED"]))
    return cfg
