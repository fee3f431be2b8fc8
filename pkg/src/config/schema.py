"""
Run Configuration Schema
Validated configuration tree for every CLI verb. Unknown keys are rejected.
"""

import hashlib
import json
from enum import Enum
from typing import Any, Dict, Optional, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from ..core.errors import ConfigError
from .defaults import (
    BATCH_SIZE, BEAM_WIDTH, CANVAS_HEIGHT, CANVAS_WIDTH, CYCLE_BATCH_SIZE,
    DECODER_LAYERS, ENCODER_LAYERS, EPOCHS, INIT_STD, ITC_TEMPERATURE,
    LEARNING_RATE, LENGTH_PENALTY, MAX_NEW_TOKENS, MAX_OBJECTS, MAX_SEQ_LEN,
    MODEL_DIM, NUM_HEADS, NUM_QUERIES, OVERLAP_CAP, PATCH_SIZE,
    PLACEMENT_RETRIES, PRIMARY_CLASS, PSEUDO_FRACTION, SCENE_RESAMPLES,
    WEIGHT_DECAY,
)

PARAM_GROUPS = ("image", "embedding", "text", "queries", "fusion", "decoder", "heads")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Stage(str, Enum):
    ACTIVATION = "activation"
    CYCLE = "cycle"


class SceneConfig(_Strict):
    width: int = CANVAS_WIDTH
    height: int = CANVAS_HEIGHT
    min_objects: int = 1
    max_objects: int = MAX_OBJECTS
    overlap_cap: float = OVERLAP_CAP
    placement_retries: int = PLACEMENT_RETRIES
    scene_resamples: int = SCENE_RESAMPLES

    @model_validator(mode="after")
    def _check(self):
        if self.width < 32 or self.height < 32:
            raise ValueError("canvas must be at least 32x32")
        if not 1 <= self.max_objects <= 8:
            raise ValueError("max_objects must be in [1, 8]")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("min_objects must be in [1, max_objects]")
        if not 0.0 <= self.overlap_cap <= 1.0:
            raise ValueError("overlap_cap must be in [0, 1]")
        if self.placement_retries < 1 or self.scene_resamples < 1:
            raise ValueError("retry counts must be positive")
        return self


class DatasetConfig(_Strict):
    num_scenes: int = 5000
    val_ratio: float = 0.1
    test_ratio: float = 0.1
    detection_scenes: int = 0  # extra expression-free scenes for pseudo-labelling
    detection_only: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.num_scenes < 1 or self.detection_scenes < 0 or self.seed < 0:
            raise ValueError("num_scenes must be positive, detection_scenes and seed non-negative")
        if self.val_ratio < 0 or self.test_ratio < 0 or self.val_ratio + self.test_ratio >= 1:
            raise ValueError("split ratios must be non-negative and leave room for train")
        return self


class ModelConfig(_Strict):
    d: int = MODEL_DIM
    patch: int = PATCH_SIZE
    enc_layers: int = ENCODER_LAYERS
    dec_layers: int = DECODER_LAYERS
    heads: int = NUM_HEADS
    num_queries: int = NUM_QUERIES
    vocab_size: int = 0  # filled from the vocabulary when the model is built
    max_seq_len: int = MAX_SEQ_LEN
    image_height: int = CANVAS_HEIGHT
    image_width: int = CANVAS_WIDTH
    mlp_ratio: int = 4
    init_std: float = INIT_STD
    tie_embeddings: bool = False

    @property
    def h_f(self) -> int:
        return self.image_height // self.patch

    @property
    def w_f(self) -> int:
        return self.image_width // self.patch

    @model_validator(mode="after")
    def _check(self):
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ValueError("d must be a positive multiple of heads")
        if self.patch < 1 or self.image_height % self.patch or self.image_width % self.patch:
            raise ValueError("patch must divide the image height and width")
        if self.num_queries < 0 or self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("num_queries must be >= 0 and layer counts >= 1")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be at least 2")
        return self


class LossWeights(_Strict):
    lm: float = 1.0
    itc: float = 1.0
    itg: float = 1.0
    itm: float = 1.0
    cyc: float = 1.0

    @model_validator(mode="after")
    def _check(self):
        for name, value in self.model_dump().items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        return self


ACTIVATION_WEIGHTS = LossWeights(lm=1.0, itc=0.0, itg=0.0, itm=0.0, cyc=0.0)


class TrainConfig(_Strict):
    stage: Stage = Stage.ACTIVATION
    epochs: int = EPOCHS
    lr: float = LEARNING_RATE
    min_lr: float = 0.0
    weight_decay: float = WEIGHT_DECAY
    batch_size: int = BATCH_SIZE
    grad_clip: Optional[float] = 1.0
    seed: int = 0
    freeze: Tuple[str, ...] = ()
    weights: LossWeights = ACTIVATION_WEIGHTS
    itc_temperature: float = ITC_TEMPERATURE
    checkpoint_every: int = 1
    few_shot_per_class: Optional[int] = None
    # cycle stage only
    reg_supervision: bool = False  # also train the generator on gold REG answers
    cycle_backprop: bool = False
    cycle_batch_size: int = CYCLE_BATCH_SIZE
    cycle_every: int = 1
    pseudo_fraction: float = PSEUDO_FRACTION
    pseudo_start_epoch: Optional[int] = None
    pseudo_refresh_every: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("epochs, lr and batch_size must be positive")
        unknown = set(self.freeze) - set(PARAM_GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups in freeze: {sorted(unknown)}")
        if self.stage == Stage.ACTIVATION and self.weights.cyc > 0:
            raise ValueError("the activation stage has no cycle term; set weights.cyc to 0")
        if self.weights.lm <= 0:
            raise ValueError("weights.lm must be positive")
        if not 0.0 <= self.pseudo_fraction < 1.0:
            raise ValueError("pseudo_fraction must be in [0, 1)")
        if self.cycle_every < 1 or self.cycle_batch_size < 1 or self.pseudo_refresh_every < 0:
            raise ValueError("cycle_every and cycle_batch_size must be positive")
        if self.few_shot_per_class is not None and self.few_shot_per_class < 1:
            raise ValueError("few_shot_per_class must be positive")
        return self


class BeamConfig(_Strict):
    beam_width: int = BEAM_WIDTH
    max_new_tokens: int = MAX_NEW_TOKENS
    length_penalty: float = LENGTH_PENALTY
    eos_id: int = 2

    @model_validator(mode="after")
    def _check(self):
        if self.beam_width < 1 or self.max_new_tokens < 1 or self.length_penalty < 0:
            raise ValueError("beam_width and max_new_tokens must be >= 1, length_penalty >= 0")
        return self


class PathsConfig(_Strict):
    data_dir: Optional[str] = None  # defaults to <out>/data
    activation_checkpoint: Optional[str] = None  # defaults to <out>/activation/model.ckpt
    pseudo_corpus: Optional[str] = None


class RunConfig(_Strict):
    seed: int = 0
    scene: SceneConfig = SceneConfig()
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    cycle: TrainConfig = TrainConfig(stage=Stage.CYCLE, weights=LossWeights())
    beam: BeamConfig = BeamConfig()
    paths: PathsConfig = PathsConfig()
    primary_class: str = PRIMARY_CLASS

    @model_validator(mode="after")
    def _check(self):
        if (self.model.image_height, self.model.image_width) != (self.scene.height, self.scene.width):
            raise ValueError("model image size must match the scene canvas")
        if self.train.stage != Stage.ACTIVATION or self.cycle.stage != Stage.CYCLE:
            raise ValueError("train must be the activation stage and cycle the cycle stage")
        return self


def fingerprint(config: BaseModel) -> str:
    """sha256 of the canonical JSON form."""
    payload = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def run_config_from_dict(data: Dict[str, Any], base: Optional[RunConfig] = None) -> RunConfig:
    """Validate ``data`` layered over ``base`` (the defaults when omitted) into a RunConfig.

    Sections are merged key by key, so a partial ``cycle`` section keeps the
    cycle stage and its loss weights.
    """
    base = base if base is not None else RunConfig()
    data = _deep_merge(base.model_dump(mode="json"), data)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid run config: {e}") from e


def load_run_config(path: str, base: Optional[RunConfig] = None) -> RunConfig:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return run_config_from_dict(data, base)


def save_run_config(config: RunConfig, path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(config.model_dump(mode="json"), f, indent=2, sort_keys=True)
        f.write("\n")
