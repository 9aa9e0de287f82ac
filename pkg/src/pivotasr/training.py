"""Two-stage training: pretrain the bifocal transducer, then freeze it and
fine-tune only the context encoder, both attention networks, and the no-bias
row.

The training loss is the alignment-lattice NLL normalized per target label.
Plain SGD with global-norm gradient clipping keeps convergence testable and
deterministic under a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fnmatch import fnmatchcase

import numpy as np

from . import biasing, nn, transducer
from .errors import ConfigError, TrainingDiverged
from .transducer import LARGE, SMALL

STAGE_PRETRAIN = "pretrain"
STAGE_FINETUNE = "finetune-biasing"

# Tensors the fine-tuning stage must freeze / may train.
DEFAULT_FREEZE_PATTERNS = ("enc_small.*", "enc_large.*", "pred.*", "joint.*")
BIASING_PREFIXES = ("ctx.", "attn.", "nobias.")


@dataclass
class TrainConfig:
    stage: str = STAGE_PRETRAIN
    learning_rate: float = 0.4
    epochs: int = 10
    batch_size: int = 16
    seed: int = 7
    freeze_patterns: tuple = ()
    clip_norm: float = 5.0

    def validate(self):
        if self.stage not in (STAGE_PRETRAIN, STAGE_FINETUNE):
            raise ConfigError(f"unknown training stage {self.stage!r}")
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("learning_rate, epochs, batch_size must be positive")
        return self


def is_biasing_tensor(name):
    return name.startswith(BIASING_PREFIXES)


def apply_freeze(model, patterns):
    """Set frozen flags from name patterns; returns the frozen names."""
    frozen = []
    for name, p in model.params.items():
        p.frozen = any(fnmatchcase(name, pat) for pat in patterns)
        if p.frozen:
            frozen.append(name)
    return sorted(frozen)


def validate_finetune_freeze(model, patterns):
    """Every transducer tensor must be frozen; no biasing tensor may be."""
    for name in model.param_names():
        matched = any(fnmatchcase(name, pat) for pat in patterns)
        if is_biasing_tensor(name):
            if matched:
                raise ConfigError(f"freeze manifest must not cover biasing tensor {name}")
        elif not matched:
            raise ConfigError(f"freeze manifest misses transducer tensor {name}")


def sgd_step(params, lr):
    """p <- p - lr * grad for every unfrozen param with a gradient.

    Assigns new arrays (never mutates in place) so recorded tapes stay valid.
    """
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    items = sorted(params.items()) if isinstance(params, dict) else [
        (p.name, p) for p in params
    ]
    for _, p in items:
        if p.frozen or p.grad is None:
            continue
        p.data = p.data - lr * p.grad


def clip_gradients(params, max_norm):
    """Scale unfrozen gradients so their global norm is at most max_norm."""
    items = sorted(params.items()) if isinstance(params, dict) else [
        (p.name, p) for p in params
    ]
    sq = 0.0
    for _, p in items:
        if p.frozen or p.grad is None:
            continue
        sq += float((p.grad * p.grad).sum())
    norm = math.sqrt(sq)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for _, p in items:
            if p.frozen or p.grad is None:
                continue
            p.grad = p.grad * factor
    return norm


def utterance_segments(utt, route_negatives_large=False):
    """Split an utterance's frames into (frames, path) pivot segments."""
    frames = utt.frames
    ww_end = -1 if (route_negatives_large and not utt.is_true_ww) else utt.ww_end_frame
    split = ww_end + 1
    segments = []
    if split > 0:
        segments.append((frames[:split], SMALL))
    if split < frames.shape[0]:
        segments.append((frames[split:], LARGE))
    return segments


def utterance_nll(
    model,
    utt,
    tape=None,
    cache=None,
    mask_policy=biasing.MASK_DYNAMIC,
    route_negatives_large=False,
):
    """Lattice NLL of one utterance under the pivoted (optionally biased) model."""
    enc_segments = []
    for frames, path in utterance_segments(utt, route_negatives_large):
        enc = model.encode(frames, path, tape)
        if cache is not None:
            enc, _ = biasing.apply_biasing(
                enc, path, cache, model.biasing, tape, mask_policy=mask_policy
            )
        enc_segments.append((enc, path))
    lp = transducer.log_prob_lattice(enc_segments, utt.tokens, model.transducer, tape)
    return transducer.rnnt_nll(lp, utt.tokens, tape)


def _epoch_batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _run_epochs(model, utts, cfg, catalog=None, mask_policy=biasing.MASK_DYNAMIC):
    rng = np.random.default_rng(cfg.seed)
    finetune = cfg.stage == STAGE_FINETUNE
    history = []
    for epoch in range(cfg.epochs):
        epoch_nll = 0.0
        epoch_labels = 0
        for batch in _epoch_batches(len(utts), cfg.batch_size, rng):
            tape = nn.Tape()
            cache = (
                biasing.build_catalog_cache(catalog, model.biasing, tape)
                if finetune
                else None
            )
            total = None
            n_labels = 0
            for i in batch:
                utt = utts[int(i)]
                nll = utterance_nll(
                    model,
                    utt,
                    tape,
                    cache=cache,
                    mask_policy=mask_policy,
                    route_negatives_large=finetune,
                )
                n_labels += max(1, len(utt.tokens))
                total = nll if total is None else nn.add(total, nll, tape)
            loss = nn.scale(total, 1.0 / n_labels, tape)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"{cfg.stage}: non-finite loss at epoch {epoch}, "
                    f"batch starting with utterance {utts[int(batch[0])].utt_id}"
                )
            tape.backward(loss)
            clip_gradients(model.params, cfg.clip_norm)
            sgd_step(model.params, cfg.learning_rate)
            epoch_nll += float(loss.data) * n_labels
            epoch_labels += n_labels
        history.append(epoch_nll / epoch_labels)
    return history


def pretrain(model, utts, cfg):
    """Minimize the pivoted transducer loss with biasing disabled.

    Returns per-epoch mean loss (nats per label).
    """
    cfg = TrainConfig(**{**cfg.__dict__, "stage": STAGE_PRETRAIN}).validate()
    apply_freeze(model, ())
    if not utts:
        raise ConfigError("pretrain needs a nonempty corpus")
    return _run_epochs(model, utts, cfg)


def finetune_biasing(model, utts, catalog, cfg, mask_policy=biasing.MASK_DYNAMIC):
    """Train only the biasing tensors against frozen transducer weights.

    Negative-wake-word utterances route entirely through the large path.
    Returns per-epoch mean loss (nats per label).
    """
    cfg = TrainConfig(**{**cfg.__dict__, "stage": STAGE_FINETUNE}).validate()
    if model.biasing is None:
        raise ConfigError("model has no biasing layers to fine-tune")
    if not utts:
        raise ConfigError("fine-tuning needs a nonempty corpus")
    if not catalog:
        raise ConfigError("fine-tuning needs a nonempty catalog")
    patterns = cfg.freeze_patterns or DEFAULT_FREEZE_PATTERNS
    validate_finetune_freeze(model, patterns)
    apply_freeze(model, patterns)
    try:
        return _run_epochs(model, utts, cfg, catalog=catalog, mask_policy=mask_policy)
    finally:
        pass
