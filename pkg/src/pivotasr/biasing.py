"""Catalog biasing: context encoder, embedding cache, masked attention.

A BiLSTM context encoder turns each catalog entry's token ids into a fixed
embedding; embeddings are cached per catalog.  A single-head scaled
dot-product attention layer scores encoder outputs against the active cache
rows and adds an output-projected context vector back onto the encoder
output (residual).  Dynamic masking restricts lead-in frames to wake-word
rows and post-wake-word frames to proper-name rows; a learned no-bias row is
always active so the attention can choose to bias nothing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DataError, ShapeError
from .transducer import LARGE, SMALL

WAKE_WORD = "ww"
PROPER_NAME = "proper_name"
NO_BIAS = "no_bias"

LEAD_IN = "lead_in"
POST_WW = "post_ww"

MASK_DYNAMIC = "dynamic"
MASK_NONE = "none"


@dataclass(frozen=True)
class CatalogEntry:
    kind: str
    surface: str
    token_ids: tuple = ()

    def __post_init__(self):
        if self.kind not in (WAKE_WORD, PROPER_NAME, NO_BIAS):
            raise DataError(f"unknown catalog entry kind {self.kind!r}")
        if self.kind == NO_BIAS and self.surface:
            raise DataError("the no-bias entry has an empty surface")


@dataclass
class BiasingConfig:
    ctx_embed_dim: int = 16
    ctx_units: int = 16
    d_ctx: int = 16
    small_proj_dim: int = 16
    large_proj_dim: int = 32
    heads: int = 1

    def validate(self, dual_attn=True):
        if self.heads != 1:
            raise ConfigError("only 1 attention head is supported")
        for f in ("ctx_embed_dim", "ctx_units", "d_ctx", "small_proj_dim", "large_proj_dim"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")
        if dual_attn and self.small_proj_dim >= self.large_proj_dim:
            raise ConfigError(
                "dual-attention requires small_proj_dim < large_proj_dim, got "
                f"{self.small_proj_dim} >= {self.large_proj_dim}"
            )
        return self


@dataclass
class AttnParams:
    side: str
    proj_dim: int
    query_dim: int
    wq: nn.ParamTensor
    bq: nn.ParamTensor
    wk: nn.ParamTensor
    bk: nn.ParamTensor
    wv: nn.ParamTensor
    bv: nn.ParamTensor
    wo: nn.ParamTensor
    bo: nn.ParamTensor


@dataclass
class ContextEncoderParams:
    emb: nn.ParamTensor
    lstm: nn.BiLstmParams
    out_w: nn.ParamTensor
    out_b: nn.ParamTensor


@dataclass
class BiasingParams:
    cfg: BiasingConfig
    ctx: ContextEncoderParams
    nobias: nn.ParamTensor
    small: AttnParams
    large: AttnParams

    def side(self, path):
        if path == SMALL:
            return self.small
        if path == LARGE:
            return self.large
        raise ConfigError(f"unknown biasing path {path!r}")


def _build_attn(side, query_dim, d_ctx, proj_dim, seed, registry):
    # Output projection starts at zero so the residual combine is an exact
    # identity before fine-tuning.
    name = f"attn.{side}"
    return AttnParams(
        side=side,
        proj_dim=proj_dim,
        query_dim=query_dim,
        wq=nn.init_param(f"{name}.wq", (proj_dim, query_dim), seed, registry=registry),
        bq=nn.init_param(f"{name}.bq", (proj_dim,), seed, zero=True, registry=registry),
        wk=nn.init_param(f"{name}.wk", (proj_dim, d_ctx), seed, registry=registry),
        bk=nn.init_param(f"{name}.bk", (proj_dim,), seed, zero=True, registry=registry),
        wv=nn.init_param(f"{name}.wv", (proj_dim, d_ctx), seed, registry=registry),
        bv=nn.init_param(f"{name}.bv", (proj_dim,), seed, zero=True, registry=registry),
        wo=nn.init_param(f"{name}.wo", (query_dim, proj_dim), seed, zero=True, registry=registry),
        bo=nn.init_param(f"{name}.bo", (query_dim,), seed, zero=True, registry=registry),
    )


def build_biasing_params(bcfg, token_vocab, small_query_dim, large_query_dim, seed, registry):
    """Create context-encoder, no-bias, and both attention parameter sets."""
    ctx = ContextEncoderParams(
        emb=nn.init_param("ctx.emb", (token_vocab, bcfg.ctx_embed_dim), seed, registry=registry),
        lstm=nn.BiLstmParams(
            fw=nn.make_lstm("ctx.fw", bcfg.ctx_embed_dim, bcfg.ctx_units, seed, registry),
            bw=nn.make_lstm("ctx.bw", bcfg.ctx_embed_dim, bcfg.ctx_units, seed, registry),
        ),
        out_w=nn.init_param("ctx.out.w", (bcfg.d_ctx, 2 * bcfg.ctx_units), seed, registry=registry),
        out_b=nn.init_param("ctx.out.b", (bcfg.d_ctx,), seed, zero=True, registry=registry),
    )
    nobias = nn.init_param("nobias.row", (bcfg.d_ctx,), seed, registry=registry)
    small = _build_attn(SMALL, small_query_dim, bcfg.d_ctx, bcfg.small_proj_dim, seed, registry)
    large = _build_attn(LARGE, large_query_dim, bcfg.d_ctx, bcfg.large_proj_dim, seed, registry)
    return BiasingParams(bcfg, ctx, nobias, small, large)


def context_encode(token_ids, ctx, tape=None):
    """Embed token ids, run the BiLSTM, and project the concatenated final
    forward and final backward states down to the catalog embedding dim."""
    ids = np.asarray(list(token_ids), dtype=np.intp)
    if ids.size == 0:
        raise DataError("context_encode: empty token sequence")
    seq = nn.gather_rows(ctx.emb, ids, tape)
    fwd, bwd = nn.bilstm_forward(seq, ctx.lstm, tape)
    last_fwd = nn.row(fwd, ids.size - 1, tape)
    first_bwd = nn.row(bwd, 0, tape)
    summary = nn.concat_rows([last_fwd, first_bwd], tape)
    return nn.dense_forward(summary, ctx.out_w, ctx.out_b, tape)


@dataclass
class CatalogCache:
    """Immutable per-catalog embedding table; row order follows the catalog,
    with the no-bias row appended last."""

    entries: list
    embeddings: nn.Tensor
    d_ctx: int = field(default=0)

    def __post_init__(self):
        if self.d_ctx == 0:
            self.d_ctx = self.embeddings.data.shape[1]

    @property
    def n_rows(self):
        return len(self.entries)

    @property
    def n_real(self):
        return len(self.entries) - 1

    def kind_rows(self, kind):
        return np.array([e.kind == kind for e in self.entries], dtype=bool)


def build_catalog_cache(catalog, params, tape=None):
    """Encode every catalog entry plus the learned no-bias row.

    Pure function of (catalog, parameters): rebuilding with the same inputs
    is bit-identical.  Pass a tape during fine-tuning so gradients reach the
    context encoder.
    """
    rows = []
    for entry in catalog:
        if entry.kind == NO_BIAS:
            raise DataError("the no-bias entry is added automatically; do not include it")
        if not entry.token_ids:
            raise DataError(f"catalog entry {entry.surface!r} has no tokens")
        rows.append(context_encode(entry.token_ids, params.ctx, tape))
    rows.append(params.nobias)
    entries = list(catalog) + [CatalogEntry(NO_BIAS, "", ())]
    return CatalogCache(entries=entries, embeddings=nn.stack_rows(rows, tape))


@dataclass
class SegmentMask:
    active: np.ndarray

    @property
    def active_count(self):
        return int(self.active.sum())

    @property
    def n_active_real(self):
        # excludes the always-active no-bias row
        return self.active_count - 1


def dynamic_mask(segment, cache):
    """Per-segment catalog restriction; the no-bias row is never masked."""
    if segment == LEAD_IN:
        active = cache.kind_rows(WAKE_WORD)
    elif segment == POST_WW:
        active = cache.kind_rows(PROPER_NAME)
    else:
        raise ConfigError(f"unknown segment {segment!r}")
    active = active | cache.kind_rows(NO_BIAS)
    return SegmentMask(active=active)


def full_mask(cache):
    """All rows active (the no-masking baseline policy)."""
    return SegmentMask(active=np.ones(cache.n_rows, dtype=bool))


def segment_for_path(path):
    return LEAD_IN if path == SMALL else POST_WW


def _attn_qkw(queries, cache, mask, ap, tape):
    if queries.data.shape[-1] != ap.query_dim:
        raise ShapeError(
            f"{ap.side} attention expects query dim {ap.query_dim}, got "
            f"{queries.data.shape[-1]}"
        )
    if mask.active.shape[0] != cache.n_rows:
        raise ShapeError(
            f"mask length {mask.active.shape[0]} does not match cache rows {cache.n_rows}"
        )
    q = nn.dense_forward(queries, ap.wq, ap.bq, tape)
    k = nn.dense_forward(cache.embeddings, ap.wk, ap.bk, tape)
    v = nn.dense_forward(cache.embeddings, ap.wv, ap.bv, tape)
    scores = nn.scale(
        nn.matmul(q, nn.transpose(k, tape), tape), 1.0 / math.sqrt(ap.proj_dim), tape
    )
    weights = nn.masked_softmax(scores, mask.active, tape)
    return weights, v


def mha_bias(query, cache, mask, ap, tape=None):
    """Bias one query vector; returns (bias_vector, attention_weights).

    Masked rows carry weight exactly 0; weights are reported over all rows.
    """
    query = nn.as_tensor(query)
    if query.data.ndim != 1:
        raise ShapeError(f"mha_bias expects a single query vector, got {query.data.shape}")
    weights, v = _attn_qkw(query, cache, mask, ap, tape)
    context = nn.matmul(weights, v, tape)
    bias = nn.dense_forward(context, ap.wo, ap.bo, tape)
    return bias, weights


def mha_bias_seq(queries, cache, mask, ap, tape=None):
    """Vectorized mha_bias over the rows of (T, d_q) queries."""
    queries = nn.as_tensor(queries)
    if queries.data.ndim != 2:
        raise ShapeError(f"mha_bias_seq expects (T, d_q) queries, got {queries.data.shape}")
    weights, v = _attn_qkw(queries, cache, mask, ap, tape)
    context = nn.matmul(weights, v, tape)
    bias = nn.dense_forward(context, ap.wo, ap.bo, tape)
    return bias, weights


def apply_biasing(h_enc, path, cache, params, tape=None, mask_policy=MASK_DYNAMIC):
    """Residual-add the attention bias onto encoder outputs.

    Returns (biased_encodings, attention_weights); weights have one row per
    encoder frame and one column per cache row.
    """
    if mask_policy == MASK_DYNAMIC:
        mask = dynamic_mask(segment_for_path(path), cache)
    elif mask_policy == MASK_NONE:
        mask = full_mask(cache)
    else:
        raise ConfigError(f"unknown mask policy {mask_policy!r}")
    ap = params.side(path)
    h_enc = nn.as_tensor(h_enc)
    bias, weights = mha_bias_seq(h_enc, cache, mask, ap, tape)
    return nn.add(h_enc, bias, tape), weights


def make_catalog(wake_words, proper_names, tokenize_fn):
    """Build catalog entries from surfaces, tokenizing each one."""
    entries = [
        CatalogEntry(WAKE_WORD, w, tuple(tokenize_fn(w))) for w in wake_words
    ] + [CatalogEntry(PROPER_NAME, p, tuple(tokenize_fn(p))) for p in proper_names]
    return entries


def save_catalog(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            if e.kind == NO_BIAS:
                continue
            fh.write(f"{e.kind}\t{e.surface}\n")


def load_catalog(path, tokenize_fn):
    """Parse a ``kind<TAB>surface`` catalog file; blank lines are ignored."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[0] not in (WAKE_WORD, PROPER_NAME):
                raise DataError(f"{path}:{ln}: malformed catalog line {line!r}")
            kind, surface = parts
            entries.append(CatalogEntry(kind, surface, tuple(tokenize_fn(surface))))
    return entries


def write_attention_trace(path, cache, weights):
    """Emit a per-frame attention trace as CSV.

    Columns: frame, entry_index, kind, surface, weight.  Masked rows appear
    with weight 0.
    """
    weights = np.asarray(weights)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "entry_index", "kind", "surface", "weight"])
        for t in range(weights.shape[0]):
            for i, entry in enumerate(cache.entries):
                writer.writerow([t, i, entry.kind, entry.surface, repr(weights[t, i])])
