"""Run configuration: flat `section.key=value` text, diff-friendly.

A run is reconstructible from its config alone; the serialized text (and
its hash) is embedded in checkpoints and metrics files.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .backbone import ArchConfig
from .motion import DirectionSet


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"

    model_variant: str = "concat"                 # concat | sum | off
    model_stem_channels: int = 8
    model_stage_channels: str = "8,16,32,64"
    model_blocks: int = 1
    model_reduction: int = 4
    model_dropout_keep: float = 0.5
    model_directions: str = "0,0;1,0;-1,0;0,1;0,-1"
    model_motion_stages: str = "1,1,1,1,1"

    sampling_k_train: int = 5
    sampling_k_eval: int = 5

    optim_lr: float = 0.01
    optim_momentum: float = 0.9
    optim_weight_decay: float = 0.0005
    optim_batch_size: int = 16
    optim_epochs: int = 30
    optim_lr_step: int = 20

    data_source: str = "synthetic"                # synthetic | folder
    data_root: str = ""
    data_image_size: int = 64
    data_num_frames: int = 16
    data_noise_std: float = 0.02
    data_train_per_class: int = 200
    data_eval_per_class: int = 50
    data_norm_mean: float = 0.5
    data_norm_std: float = 0.5
    data_workers: int = 0

    train_ckpt_every: int = 1
    train_eval_every: int = 1


_SECTIONS = ("model", "sampling", "optim", "data", "train")


def _field_to_key(name):
    for sect in _SECTIONS:
        if name.startswith(sect + "_"):
            return sect + "." + name[len(sect) + 1 :]
    return name


def _key_to_field(key):
    return key.replace(".", "_", 1)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_VALID_KEYS = {_field_to_key(f.name): f.name for f in fields(RunConfig)}


def _coerce(field_name, raw):
    default = getattr(RunConfig(), field_name)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def apply_setting(cfg, key, raw_value):
    if key not in _VALID_KEYS:
        raise KeyError(f"unknown config key: {key}")
    field_name = _VALID_KEYS[key]
    setattr(cfg, field_name, _coerce(field_name, raw_value))


def config_from_lines(lines, base=None):
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        apply_setting(cfg, key.strip(), value.strip())
    return cfg


def load_config(path, base=None):
    with open(path) as fh:
        return config_from_lines(fh, base)


def config_to_text(cfg):
    lines = []
    for f in fields(RunConfig):
        lines.append(f"{_field_to_key(f.name)}={getattr(cfg, f.name)}")
    return "\n".join(sorted(lines)) + "\n"


def config_hash(cfg):
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()[:16]


def parse_directions(text):
    pairs = []
    for chunk in text.split(";"):
        dx, dy = chunk.split(",")
        pairs.append((int(dx), int(dy)))
    return DirectionSet.deserialize(pairs)


def arch_from_config(cfg, num_classes=6):
    stage_channels = tuple(int(c) for c in cfg.model_stage_channels.split(","))
    motion_stages = tuple(c.strip() == "1" for c in cfg.model_motion_stages.split(","))
    return ArchConfig(
        image_size=cfg.data_image_size,
        stem_channels=cfg.model_stem_channels,
        stage_channels=stage_channels,
        blocks_per_stage=cfg.model_blocks,
        num_classes=num_classes,
        dropout_keep=cfg.model_dropout_keep,
        motion=cfg.model_variant if cfg.model_variant != "off" else "off",
        reduction_factor=cfg.model_reduction,
        directions=parse_directions(cfg.model_directions),
        motion_stages=motion_stages,
    )
