"""Flat key=value run configuration shared by ``train`` and ``crossval``."""

from __future__ import annotations

from dataclasses import fields, replace
from typing import Dict, Optional, Tuple

from .errors import ConfigError
from .evaluation import CrossValConfig
from .inference import MODE_KINDS, InferenceMode
from .trainer import TrainConfig
from .unet import ModelConfig, parse_key_values, _convert_field

MODEL_KEYS = {f.name for f in fields(ModelConfig)} - {"variant"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
INFERENCE_KEYS = {"modes", "anchor_count", "mc_passes"}

EXAMPLE = """\
# model
base_channels=8
depth=3
dropout_rate=0.5
# training
epochs=40
initial_lr=0.003
lr_halving_period=20
batch_size=8
# inference (crossval only)
modes=vanilla,repeat,anchor_train,anchor_test,mc_dropout
anchor_count=20
mc_passes=20
"""


def parse_run_config(text: str, seed: int, input_size: Optional[Tuple[int, int]] = None,
                     variant: str = "relation") -> CrossValConfig:
    """Build model, training and inference settings from one flat block.

    ``seed`` drives both training and inference; ``input_size`` defaults to
    the dataset's image size when the block does not set it.
    """
    raw = parse_key_values(text)
    unknown = set(raw) - MODEL_KEYS - TRAIN_KEYS - INFERENCE_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model_kwargs: Dict[str, object] = {k: _convert_field(k, v) for k, v in raw.items() if k in MODEL_KEYS}
    if "input_size" not in model_kwargs and input_size is not None:
        model_kwargs["input_size"] = tuple(input_size)
    model = ModelConfig(variant=variant, **model_kwargs)
    train = replace(TrainConfig.from_mapping({k: v for k, v in raw.items() if k in TRAIN_KEYS}), seed=seed)

    try:
        anchors = int(raw.get("anchor_count", 20))
        passes = int(raw.get("mc_passes", 20))
    except ValueError as exc:
        raise ConfigError("anchor_count and mc_passes must be integers") from exc
    kinds = [k.strip() for k in raw.get("modes", ",".join(MODE_KINDS)).split(",") if k.strip()]
    if not kinds:
        raise ConfigError("modes must name at least one inference mode")
    modes = tuple(InferenceMode(k, anchor_count=anchors, mc_passes=passes) for k in kinds)
    return CrossValConfig(model=model, train=train, modes=modes, inference_seed=seed)
