"""Flat run configuration: one JSON file drives the whole experiment loop.

Every key has a default; unknown keys are rejected so typos never pass
silently.  Command-line flags override file values, and the fully resolved
config is echoed into every emitted artifact (JSON reports embed it, line-
or row-oriented artifacts get a ``<name>.meta.json`` sidecar).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .biasing import BiasingConfig
from .datagen import (
    DEFAULT_CARRIERS,
    DEFAULT_LEAD_INS,
    DEFAULT_PROPER_NAMES,
    DEFAULT_WAKE_WORDS,
    VOCAB_SIZE,
    CorpusSpec,
)
from .errors import ConfigError
from .training import (
    DEFAULT_FREEZE_PATTERNS,
    STAGE_FINETUNE,
    STAGE_PRETRAIN,
    TrainConfig,
)
from .transducer import TransducerConfig

MODES = ("pretrained-base", "single-attn-base", "single-attn-catalog-mask", "dual-attn")


@dataclass
class RunConfig:
    # global
    seed: int = 1234
    mode: str = "dual-attn"
    # transducer (desk-scale defaults; paper-scale dims remain expressible)
    feat_dim: int = 16
    small_enc_units: int = 24
    large_enc_units: int = 64
    enc_layers: int = 3
    time_reduction_layer_index: int = 2
    time_reduction_factor: int = 2
    pred_embed_dim: int = 16
    pred_units: int = 32
    pred_layers: int = 1
    joint_dim: int = 32
    # biasing
    ctx_embed_dim: int = 16
    ctx_units: int = 16
    d_ctx: int = 16
    small_proj_dim: int = 16  # lambda of the small attention network
    large_proj_dim: int = 32
    # corpus
    n_utterances: int = 240
    wake_words: tuple = DEFAULT_WAKE_WORDS
    proper_names: tuple = DEFAULT_PROPER_NAMES
    carrier_phrases: tuple = DEFAULT_CARRIERS
    lead_in_carriers: tuple = DEFAULT_LEAD_INS
    frames_per_token: int = 2
    noise_std: float = 1.0
    negative_ww_fraction: float = 0.3
    general_mix: float = 2.5
    heldout_fraction: float = 1.0 / 3.0
    # training
    pretrain_epochs: int = 18
    finetune_epochs: int = 12
    batch_size: int = 16
    learning_rate: float = 0.4
    finetune_learning_rate: float = 0.2
    clip_norm: float = 5.0
    train_seed: int = -1  # -1 derives the training stream from `seed`
    # decoding
    max_symbols_per_frame: int = 4

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.transducer_config()
        self.biasing_config()
        self.corpus_spec()
        return self

    def resolved(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    # -- adapters ---------------------------------------------------------

    def transducer_config(self):
        return TransducerConfig(
            feat_dim=self.feat_dim,
            small_enc_units=self.small_enc_units,
            large_enc_units=self.large_enc_units,
            enc_layers=self.enc_layers,
            time_reduction_layer_index=self.time_reduction_layer_index,
            time_reduction_factor=self.time_reduction_factor,
            pred_embed_dim=self.pred_embed_dim,
            pred_units=self.pred_units,
            pred_layers=self.pred_layers,
            joint_dim=self.joint_dim,
            vocab_size=VOCAB_SIZE,
        ).validate()

    def biasing_config(self):
        # Single-attention baselines run the large projection size on both
        # paths; the dual-attention mode uses the configured lambda.
        small_proj = self.small_proj_dim
        if self.mode.startswith("single-attn"):
            small_proj = self.large_proj_dim
        cfg = BiasingConfig(
            ctx_embed_dim=self.ctx_embed_dim,
            ctx_units=self.ctx_units,
            d_ctx=self.d_ctx,
            small_proj_dim=small_proj,
            large_proj_dim=self.large_proj_dim,
        )
        return cfg.validate(dual_attn=(self.mode == "dual-attn"))

    def corpus_spec(self):
        return CorpusSpec(
            seed=self.seed,
            n_utterances=self.n_utterances,
            wake_words=tuple(self.wake_words),
            proper_names=tuple(self.proper_names),
            carrier_phrases=tuple(self.carrier_phrases),
            lead_in_carriers=tuple(self.lead_in_carriers),
            frames_per_token=self.frames_per_token,
            noise_std=self.noise_std,
            negative_ww_fraction=self.negative_ww_fraction,
            general_mix=self.general_mix,
            heldout_fraction=self.heldout_fraction,
            feat_dim=self.feat_dim,
        ).validate()

    def _train_seed(self):
        return self.train_seed if self.train_seed >= 0 else self.seed + 101

    def train_config(self, stage):
        if stage == STAGE_PRETRAIN:
            return TrainConfig(
                stage=stage,
                learning_rate=self.learning_rate,
                epochs=self.pretrain_epochs,
                batch_size=self.batch_size,
                seed=self._train_seed(),
                clip_norm=self.clip_norm,
            ).validate()
        if stage == STAGE_FINETUNE:
            return TrainConfig(
                stage=stage,
                learning_rate=self.finetune_learning_rate,
                epochs=self.finetune_epochs,
                batch_size=self.batch_size,
                seed=self._train_seed(),
                freeze_patterns=DEFAULT_FREEZE_PATTERNS,
                clip_norm=self.clip_norm,
            ).validate()
        raise ConfigError(f"unknown training stage {stage!r}")


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}
_LIST_KEYS = {"wake_words", "proper_names", "carrier_phrases", "lead_in_carriers"}


def _coerce(key, value):
    if key in _LIST_KEYS:
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, str) for v in value
        ):
            raise ConfigError(f"config key {key!r} must be a list of strings")
        return tuple(value)
    default = getattr(RunConfig, key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} must be an integer")
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"config key {key!r} must be an integer")
        return int(value)
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} must be a string")
        return value
    return value


def make_config(values=None):
    """Build a RunConfig from a dict, rejecting unknown keys."""
    values = dict(values or {})
    unknown = sorted(set(values) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    coerced = {k: _coerce(k, v) for k, v in values.items()}
    return RunConfig(**coerced).validate()


def load_config(path, overrides=None):
    """Load a JSON config file and apply override values on top."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    data.update(overrides or {})
    return make_config(data)
