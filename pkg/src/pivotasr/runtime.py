"""Streaming frame loop with the wake-word pivot and an analytic FLOPs meter.

The pivot routes original frames at or before the wake-word end frame to the
small encoder plus the small attention network under the lead-in mask, and
everything after to the large encoder plus large attention under the
post-wake-word mask.  The FLOPs meter is analytic: it prices the attention
work actually executed per reduced (query) frame under a documented counting
convention and never times anything.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import biasing, transducer
from .errors import ConfigError, DataError, ShapeError
from .transducer import LARGE, SMALL, GreedyDecoder

MODE_PRETRAINED_BASE = "pretrained-base"
MODE_SINGLE_ATTN_BASE = "single-attn-base"
MODE_SINGLE_ATTN_MASK = "single-attn-catalog-mask"
MODE_DUAL_ATTN = "dual-attn"
MODES = (
    MODE_PRETRAINED_BASE,
    MODE_SINGLE_ATTN_BASE,
    MODE_SINGLE_ATTN_MASK,
    MODE_DUAL_ATTN,
)

# Counting rule used by every report this package emits.  One multiply-add
# costs 2 FLOPs; key/value projections are charged on every query frame
# (nothing is assumed cached); softmax costs 5 ops per catalog row; the
# always-active no-bias row is included (N' = N + 1); query frames are
# post-time-reduction encoder outputs.
FLOPS_CONVENTION = "mha-per-query-frame/mac=2/kv-uncached/softmax=5/nobias-counted/v1"


@dataclass
class AudioStream:
    utterance_id: str
    frames: np.ndarray
    ww_end_frame: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise DataError(
                f"stream {self.utterance_id!r}: frames must be a nonempty (T, D) array"
            )
        t = self.frames.shape[0]
        if not (-1 <= self.ww_end_frame < t):
            raise DataError(
                f"stream {self.utterance_id!r}: ww_end_frame {self.ww_end_frame} "
                f"outside [-1, {t - 1}]"
            )


def pivot_select(t, ww_end_frame):
    """Route one original frame index: small iff t <= ww_end_frame."""
    return SMALL if t <= ww_end_frame else LARGE


def mha_flops_per_frame(d_q, d_ctx, proj_dim, n_active_real):
    """Attention cost for one query frame with N real active rows.

    Terms: Q projection, K and V projections over N' = N + 1 rows, dot-product
    scores, softmax, weighted context sum, output projection.
    """
    if min(d_q, d_ctx, proj_dim) < 1 or n_active_real < 0:
        raise ConfigError("flops counting needs positive dims and N >= 0")
    n1 = n_active_real + 1
    p = proj_dim
    return (
        2 * d_q * p  # Q projection
        + 2 * n1 * d_ctx * p  # K projection
        + 2 * n1 * d_ctx * p  # V projection
        + 2 * n1 * p  # scores q . k_i
        + 5 * n1  # softmax over active rows
        + 2 * n1 * p  # context = sum w_i v_i
        + 2 * p * d_q  # output projection
    )


def flops_count(tcfg, bcfg, path, n_active_real):
    """Per-query-frame attention FLOPs for one compute path."""
    d_q = tcfg.encoder_output_dim(path)
    p = bcfg.small_proj_dim if path == SMALL else bcfg.large_proj_dim
    return mha_flops_per_frame(d_q, bcfg.d_ctx, p, n_active_real)


def _lstm_param_count(input_dim, units):
    return 4 * units * (input_dim + units) + 4 * units


def param_count(bcfg, small_query_dim, large_query_dim, token_vocab):
    """Exact biasing-layer parameter counts under this package's layers.

    Covers the context encoder (embedding, BiLSTM, output projection), the
    learned no-bias row, and both attention networks.
    """
    ctx = (
        token_vocab * bcfg.ctx_embed_dim
        + 2 * _lstm_param_count(bcfg.ctx_embed_dim, bcfg.ctx_units)
        + bcfg.d_ctx * 2 * bcfg.ctx_units
        + bcfg.d_ctx
    )

    def attn(d_q, p):
        return (p * d_q + p) + 2 * (p * bcfg.d_ctx + p) + (d_q * p + d_q)

    small = attn(small_query_dim, bcfg.small_proj_dim)
    large = attn(large_query_dim, bcfg.large_proj_dim)
    return {
        "convention": "scalar parameter counts per tensor; biases included",
        "context_encoder": ctx,
        "no_bias_row": bcfg.d_ctx,
        "small_attention": small,
        "large_attention": large,
        "small_side_total": ctx + bcfg.d_ctx + small,
        "large_side_total": ctx + bcfg.d_ctx + large,
        "combined": ctx + bcfg.d_ctx + small + large,
    }


@dataclass
class FlopsReport:
    convention_id: str
    mode: str
    leadin_mha_flops_per_frame: int
    postww_mha_flops_per_frame: int
    leadin_frames: int
    postww_frames: int
    config: dict = field(default_factory=dict)

    @property
    def leadin_total(self):
        return self.leadin_mha_flops_per_frame * self.leadin_frames

    @property
    def postww_total(self):
        return self.postww_mha_flops_per_frame * self.postww_frames

    @property
    def total(self):
        return self.leadin_total + self.postww_total

    def as_dict(self):
        return {
            "convention_id": self.convention_id,
            "mode": self.mode,
            "leadin_mha_flops_per_frame": self.leadin_mha_flops_per_frame,
            "postww_mha_flops_per_frame": self.postww_mha_flops_per_frame,
            "leadin_frames": self.leadin_frames,
            "postww_frames": self.postww_frames,
            "leadin_total_flops": self.leadin_total,
            "postww_total_flops": self.postww_total,
            "total_flops": self.total,
            "config": self.config,
        }


@dataclass
class StreamResult:
    labels: list
    reduced_paths: list
    flops: FlopsReport
    trace: np.ndarray | None = None


def mask_policy_for_mode(mode):
    if mode == MODE_SINGLE_ATTN_BASE:
        return biasing.MASK_NONE
    return biasing.MASK_DYNAMIC


def process_stream(
    stream,
    model,
    cache=None,
    mode=None,
    collect_trace=False,
    max_symbols_per_frame=4,
):
    """Decode one stream, pivoting at the wake-word boundary.

    Returns decoded labels, a FlopsReport of the attention work actually
    executed, and optionally the per-frame attention weight matrix.
    """
    mode = mode or model.mode
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if stream.frames.shape[1] != model.tcfg.feat_dim:
        raise ShapeError(
            f"stream {stream.utterance_id!r}: feature dim {stream.frames.shape[1]} "
            f"does not match model feat_dim {model.tcfg.feat_dim}"
        )
    use_bias = mode != MODE_PRETRAINED_BASE
    if use_bias and (cache is None or model.biasing is None):
        raise ConfigError(f"mode {mode!r} needs a catalog cache and biasing layers")
    policy = mask_policy_for_mode(mode)

    split = stream.ww_end_frame + 1
    segments = []
    if split > 0:
        segments.append((stream.frames[:split], SMALL))
    if split < stream.frames.shape[0]:
        segments.append((stream.frames[split:], LARGE))

    decoder = GreedyDecoder(model, max_symbols_per_frame)
    reduced_paths = []
    trace_rows = []
    frames_per_path = {SMALL: 0, LARGE: 0}
    for seg_frames, path in segments:
        enc = model.encode(seg_frames, path)
        if use_bias:
            enc, weights = biasing.apply_biasing(
                enc, path, cache, model.biasing, mask_policy=policy
            )
            if collect_trace:
                trace_rows.append(weights.data)
        elif collect_trace and cache is not None:
            trace_rows.append(np.zeros((enc.data.shape[0], cache.n_rows)))
        frames_per_path[path] += enc.data.shape[0]
        for t in range(enc.data.shape[0]):
            decoder.step(enc.data[t], path)
            reduced_paths.append(path)

    if use_bias:
        n_small = (
            cache.n_real
            if policy == biasing.MASK_NONE
            else int(cache.kind_rows(biasing.WAKE_WORD).sum())
        )
        n_large = (
            cache.n_real
            if policy == biasing.MASK_NONE
            else int(cache.kind_rows(biasing.PROPER_NAME).sum())
        )
        per_small = flops_count(model.tcfg, model.bcfg, SMALL, n_small)
        per_large = flops_count(model.tcfg, model.bcfg, LARGE, n_large)
        cfg_echo = {
            "d_q_small": model.tcfg.encoder_output_dim(SMALL),
            "d_q_large": model.tcfg.encoder_output_dim(LARGE),
            "d_ctx": model.bcfg.d_ctx,
            "small_proj_dim": model.bcfg.small_proj_dim,
            "large_proj_dim": model.bcfg.large_proj_dim,
            "leadin_active_catalog": n_small,
            "postww_active_catalog": n_large,
        }
    else:
        per_small = per_large = 0
        cfg_echo = {"biasing": "disabled"}

    report = FlopsReport(
        convention_id=FLOPS_CONVENTION,
        mode=mode,
        leadin_mha_flops_per_frame=per_small,
        postww_mha_flops_per_frame=per_large,
        leadin_frames=frames_per_path[SMALL],
        postww_frames=frames_per_path[LARGE],
        config=cfg_echo,
    )
    trace = np.concatenate(trace_rows, axis=0) if (collect_trace and trace_rows) else None
    return StreamResult(
        labels=decoder.labels, reduced_paths=reduced_paths, flops=report, trace=trace
    )


def attention_trace(stream, model, cache, mode=None, max_symbols_per_frame=4):
    """Per-frame attention weights over all catalog rows for one stream."""
    result = process_stream(
        stream,
        model,
        cache,
        mode=mode,
        collect_trace=True,
        max_symbols_per_frame=max_symbols_per_frame,
    )
    if result.trace is None:
        n_rows = cache.n_rows if cache is not None else 0
        return np.zeros((len(result.reduced_paths), n_rows))
    return result.trace
